//! Named parameter storage shared by a model and its optimizer.
//!
//! Trainable entries (weights, biases, scale/shift vectors) carry gradient
//! accumulators; state entries (batchnorm running statistics) do not train
//! but are checkpointed alongside.

/// Handle to one entry in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> ParamId {
        self.push(name, shape, values, true)
    }

    /// Non-trainable state (e.g. running statistics).
    pub fn add_state(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> ParamId {
        self.push(name, shape, values, false)
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>, trainable: bool) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "shape/value mismatch for {name}");
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let grad = vec![0.0; if trainable { values.len() } else { 0 }];
        self.entries.push(ParamEntry { name: name.to_string(), shape, values, grad, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].values
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        let entry = &mut self.entries[id.0];
        if !entry.trainable {
            return;
        }
        debug_assert_eq!(entry.grad.len(), delta.len());
        for (g, d) in entry.grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grads(&mut self) {
        for entry in &mut self.entries {
            entry.grad.fill(0.0);
        }
    }

    /// Blend running statistics: `state = momentum * state + (1 - momentum) * fresh`.
    pub fn blend_state(&mut self, id: ParamId, fresh: &[f64], momentum: f64) {
        let entry = &mut self.entries[id.0];
        debug_assert!(!entry.trainable);
        debug_assert_eq!(entry.values.len(), fresh.len());
        for (v, f) in entry.values.iter_mut().zip(fresh) {
            *v = momentum * *v + (1.0 - momentum) * f;
        }
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.values.len()).sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Copy of every entry's values (trainable and state), for best-weight
    /// restoration during training.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.values.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        assert_eq!(snapshot.len(), self.entries.len());
        for (entry, saved) in self.entries.iter_mut().zip(snapshot) {
            assert_eq!(entry.values.len(), saved.len());
            entry.values.copy_from_slice(saved);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trainable_count_ignores_state() {
        let mut store = ParamStore::new();
        store.add_param("w", vec![2, 3], vec![0.0; 6]);
        store.add_state("rm", vec![3], vec![0.0; 3]);
        store.add_param("b", vec![3], vec![0.0; 3]);
        assert_eq!(store.trainable_count(), 9);
    }

    #[test]
    fn snapshot_restore_roundtrip() {
        let mut store = ParamStore::new();
        let w = store.add_param("w", vec![2], vec![1.0, 2.0]);
        let snap = store.snapshot();
        store.values_mut(w)[0] = 9.0;
        store.restore(&snap);
        assert_eq!(store.values(w), &[1.0, 2.0]);
    }

    #[test]
    fn blend_state_applies_momentum() {
        let mut store = ParamStore::new();
        let s = store.add_state("rv", vec![2], vec![1.0, 0.0]);
        store.blend_state(s, &[0.0, 1.0], 0.9);
        assert!((store.values(s)[0] - 0.9).abs() < 1e-15);
        assert!((store.values(s)[1] - 0.1).abs() < 1e-15);
    }
}
