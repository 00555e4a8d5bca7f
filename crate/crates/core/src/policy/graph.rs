use autodiff::{Graph, NodeId};

use super::{names, PolicyParameters};
use crate::error::{Error, Result};
use crate::task::Token;

/// Adds policy log-probability terms to a computation graph. Parameter
/// inputs are shared across every term built on the same graph, so gradients
/// from all terms accumulate into one set of parameter gradients.
pub struct PolicyGraph<'g> {
    graph: &'g mut Graph,
    params: &'g PolicyParameters,
}

impl<'g> PolicyGraph<'g> {
    pub fn new(graph: &'g mut Graph, params: &'g PolicyParameters) -> Self {
        Self { graph, params }
    }

    pub fn graph(&mut self) -> &mut Graph {
        self.graph
    }

    /// Scalar node for `log π(target | context)`, summed over target tokens.
    /// An empty target yields the constant 0.
    pub fn continuation_logprob(&mut self, context: &[Token], target: &[Token]) -> Result<NodeId> {
        if target.is_empty() {
            return Ok(self.graph.scalar(0.0));
        }
        if context.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot score a continuation of an empty context".into(),
            ));
        }
        let seq: Vec<Token> = context.iter().chain(target).copied().collect();
        self.params.check_tokens(&seq)?;
        let cfg = self.params.config();
        let g = &mut *self.graph;
        let n = seq.len();

        let tok_emb = g.input("tok_emb");
        let pos_emb = g.input("pos_emb");
        let tok = g.gather(tok_emb, seq.iter().map(|&t| t as usize).collect());
        let pos = g.gather(pos_emb, (0..n).collect());
        let mut x = g.add(tok, pos);

        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
        for l in 0..cfg.n_layers {
            let h = g.rms_norm(x);
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let wq = g.input(&names::attn(l, "wq", head));
                let wk = g.input(&names::attn(l, "wk", head));
                let wv = g.input(&names::attn(l, "wv", head));
                let q = g.matmul(h, wq);
                let k = g.matmul(h, wk);
                let v = g.matmul(h, wv);
                let kt = g.transpose(k);
                let s = g.matmul(q, kt);
                let s = g.scale(s, scale);
                let p = g.causal_softmax(s);
                heads.push(g.matmul(p, v));
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat(heads) };
            let wo = g.input(&names::layer(l, "attn.wo"));
            let attn = g.matmul(cat, wo);
            x = g.add(x, attn);

            let h = g.rms_norm(x);
            let w1 = g.input(&names::layer(l, "ffn.w1"));
            let b1 = g.input(&names::layer(l, "ffn.b1"));
            let w2 = g.input(&names::layer(l, "ffn.w2"));
            let b2 = g.input(&names::layer(l, "ffn.b2"));
            let f = g.matmul(h, w1);
            let f = g.add_row(f, b1);
            let f = g.gelu(f);
            let f = g.matmul(f, w2);
            let f = g.add_row(f, b2);
            x = g.add(x, f);
        }

        // Only positions that predict a target token reach the output head.
        let start = context.len();
        let x = g.rms_norm(x);
        let rows = g.gather(x, (start - 1..n - 1).collect());
        let head = g.input("head");
        let logits = g.matmul(rows, head);
        let lsm = g.log_softmax(logits);
        let picks = g.pick(
            lsm,
            target.iter().enumerate().map(|(i, &t)| (i, t as usize)).collect(),
        );
        Ok(g.sum(picks))
    }
}

impl PolicyParameters {
    /// `log π(target | context)` evaluated through the graph path. This is
    /// the same arithmetic the training objectives use.
    pub fn logprob(&self, context: &[Token], target: &[Token]) -> Result<f64> {
        let mut graph = Graph::new();
        let root = PolicyGraph::new(&mut graph, self).continuation_logprob(context, target)?;
        Ok(graph.forward(root, self)?.item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;
    use crate::rng::stream;

    #[test]
    fn zero_weights_give_uniform_logprob() {
        let p = PolicyParameters::zeros(PolicyConfig::default()).unwrap();
        let lp = p.logprob(&[11, 3, 4], &[5, 6, 7, 12]).unwrap();
        let expected = -4.0 * (PolicyConfig::default().vocab_size as f64).ln();
        assert!((lp - expected).abs() < 1e-12, "{lp} vs {expected}");
    }

    #[test]
    fn empty_target_scores_zero() {
        let p = PolicyParameters::init(PolicyConfig::default(), &mut stream(3)).unwrap();
        assert_eq!(p.logprob(&[11, 2], &[]).unwrap(), 0.0);
    }

    #[test]
    fn rejects_overflow_and_unknown_tokens() {
        let p = PolicyParameters::zeros(PolicyConfig::default()).unwrap();
        let long = vec![1; 200];
        assert!(matches!(
            p.logprob(&[11], &long),
            Err(Error::ContextOverflow { len: 201, max: 128 })
        ));
        assert!(matches!(
            p.logprob(&[11], &[99]),
            Err(Error::UnknownToken { token: 99, .. })
        ));
        assert!(matches!(p.logprob(&[], &[1]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn split_point_does_not_change_joint_logprob() {
        let p = PolicyParameters::init(PolicyConfig::default(), &mut stream(8)).unwrap();
        let seq = [11, 4, 9, 14, 20, 3, 12];
        let whole = p.logprob(&seq[..1], &seq[1..]).unwrap();
        let parts = p.logprob(&seq[..3], &seq[3..]).unwrap() + p.logprob(&seq[..1], &seq[1..3]).unwrap();
        assert!((whole - parts).abs() < 1e-12);
    }
}
