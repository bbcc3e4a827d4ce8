//! SGD with momentum and weight decay, plus the warm-up/cosine epoch
//! schedule. The auxiliary heads get their own instance at a constant rate.

use crate::tensor::{Graph, ParamId, ParamKind, ParamStore};

/// Learning rate at `epoch`: linear warm-up over the first `warmup` epochs,
/// then cosine decay over the remainder.
pub fn learning_rate(base: f64, epoch: usize, total_epochs: usize, warmup: usize) -> f64 {
    if warmup > 0 && epoch < warmup {
        return base * (epoch + 1) as f64 / warmup as f64;
    }
    let span = total_epochs.saturating_sub(warmup).max(1);
    let t = (epoch - warmup) as f64 / span as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Momentum SGD over one parameter group.
pub struct Sgd {
    kind: ParamKind,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(kind: ParamKind) -> Self {
        Sgd { kind, velocity: Vec::new() }
    }

    fn velocity_mut(&mut self, id: ParamId, len: usize) -> &mut Vec<f64> {
        let idx = id.index();
        if self.velocity.len() <= idx {
            self.velocity.resize(idx + 1, None);
        }
        self.velocity[idx].get_or_insert_with(|| vec![0.0; len])
    }

    /// v ← μ·v + (g + wd·θ); θ ← θ − lr·v, over every parameter of this
    /// group that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, graph: &Graph, lr: f64, momentum: f64, weight_decay: f64) {
        let ids: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| p.kind == self.kind)
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let Some(grad) = graph.param_grad(id) else { continue };
            let grad = grad.to_vec();
            let v = self.velocity_mut(id, grad.len());
            let data = store.data_mut(id);
            for ((w, g), vi) in data.iter_mut().zip(grad.iter()).zip(v.iter_mut()) {
                *vi = momentum * *vi + (g + weight_decay * *w);
                *w -= lr * *vi;
            }
        }
    }

    /// Drop accumulated state for re-initialized parameters.
    pub fn clear(&mut self, ids: &[ParamId]) {
        for id in ids {
            if let Some(slot) = self.velocity.get_mut(id.index()) {
                *slot = None;
            }
        }
    }

    /// (param id, velocity) pairs with live state, for checkpointing.
    pub fn state(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.velocity
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.as_deref().map(|v| (ParamId::from_index(i), v)))
    }

    pub fn restore(&mut self, id: ParamId, velocity: Vec<f64>) {
        let idx = id.index();
        if self.velocity.len() <= idx {
            self.velocity.resize(idx + 1, None);
        }
        self.velocity[idx] = Some(velocity);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::init::Init;

    #[test]
    fn schedule_matches_closed_form() {
        let (base, total, warmup) = (0.01, 20, 5);
        for epoch in 0..total {
            let got = learning_rate(base, epoch, total, warmup);
            let want = if epoch < warmup {
                base * (epoch + 1) as f64 / warmup as f64
            } else {
                0.5 * base * (1.0 + (std::f64::consts::PI * (epoch - warmup) as f64 / (total - warmup) as f64).cos())
            };
            assert!((got - want).abs() < 1e-12);
        }
        // warm-up tops out exactly at the base rate
        assert!((learning_rate(base, warmup - 1, total, warmup) - base).abs() < 1e-15);
        assert!((learning_rate(base, warmup, total, warmup) - base).abs() < 1e-15);
    }

    #[test]
    fn sgd_moves_only_its_group() {
        let mut store = ParamStore::new(1);
        let main = store.add("w.main", &[2], Init::Ones, ParamKind::Main);
        let aux = store.add("w.aux", &[2], Init::Ones, ParamKind::Aux);
        let mut g = Graph::new();
        let m = g.bind(&store, main).unwrap();
        let a = g.bind(&store, aux).unwrap();
        let s0 = g.add(m, a).unwrap();
        let s1 = g.sum_all(s0).unwrap();
        g.backward(s1).unwrap();
        let mut opt = Sgd::new(ParamKind::Main);
        opt.step(&mut store, &g, 0.5, 0.0, 0.0);
        assert_eq!(store.data(main), &[0.5, 0.5]);
        assert_eq!(store.data(aux), &[1.0, 1.0], "aux group untouched by main optimizer");
    }

    #[test]
    fn momentum_accumulates_and_clear_resets() {
        let mut store = ParamStore::new(2);
        let w = store.add("w", &[1], Init::Zeros, ParamKind::Main);
        let mut opt = Sgd::new(ParamKind::Main);
        // two identical steps with gradient 1.0
        for _ in 0..2 {
            let mut g = Graph::new();
            let t = g.bind(&store, w).unwrap();
            let s = g.sum_all(t).unwrap();
            g.backward(s).unwrap();
            opt.step(&mut store, &g, 0.1, 0.9, 0.0);
        }
        // v1 = 1, w1 = -0.1; v2 = 1.9, w2 = -0.29
        assert!((store.data(w)[0] + 0.29).abs() < 1e-12);
        opt.clear(&[w]);
        assert_eq!(opt.state().count(), 0);
    }
}
