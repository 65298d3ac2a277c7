//! Named parameter storage with gradient slots, plus finite-difference
//! verification of analytic gradients.

use std::collections::BTreeMap;

use super::{DenseArray, RngState, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub value: DenseArray<T>,
    pub grad: DenseArray<T>,
    /// Frozen entries are saved and differentiated but never updated.
    pub frozen: bool,
}

/// Ordered map of name -> array. Iteration is lexicographic by name, which
/// fixes the checkpoint layout and the optimizer update order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: DenseArray<T>) -> Result<()> {
        self.insert_entry(name, value, false)
    }

    pub fn insert_frozen(&mut self, name: &str, value: DenseArray<T>) -> Result<()> {
        self.insert_entry(name, value, true)
    }

    fn insert_entry(&mut self, name: &str, value: DenseArray<T>, frozen: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let grad = DenseArray::zeros(value.shape());
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                grad,
                frozen,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    /// Value lookup; missing names are a programming error.
    pub fn value(&self, name: &str) -> &DenseArray<T> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut DenseArray<T> {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn grad(&self, name: &str) -> &DenseArray<T> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .grad
    }

    /// Accumulates `g` into the gradient slot of `name`.
    pub fn add_grad(&mut self, name: &str, g: &DenseArray<T>) {
        let e = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        e.grad.add_assign(g);
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = DenseArray::zeros(e.value.shape());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// Number of named entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all entries.
    pub fn total_values(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Maps a global scalar index to (name, offset within that entry).
    pub fn locate(&self, mut index: usize) -> (&str, usize) {
        for (name, e) in &self.entries {
            if index < e.value.len() {
                return (name.as_str(), index);
            }
            index -= e.value.len();
        }
        panic!("scalar index out of range");
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let entries = self
            .entries
            .iter()
            .map(|(name, e)| {
                (
                    name.clone(),
                    ParamEntry {
                        value: e.value.cast::<U>(),
                        grad: e.grad.cast::<U>(),
                        frozen: e.frozen,
                    },
                )
            })
            .collect();
        ParamStore { entries }
    }

    pub fn check_finite(&self, ctx: &str) -> Result<()> {
        for (name, e) in &self.entries {
            e.value.check_finite(&format!("{ctx}: {name}"))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub worst_rel_err: f64,
    pub samples: usize,
    pub worst_param: String,
    pub worst_index: usize,
}

/// Compares the analytic gradients stored in `params` against central
/// differences of `loss_fn` at `samples` randomly chosen scalar parameters.
/// Returns the worst relative error, with denominator max(|a|, |n|, 1e-8).
pub fn finite_diff_check<F>(
    params: &ParamStore<f64>,
    loss_fn: F,
    eps: f64,
    samples: usize,
    rng: &mut RngState,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<f64>,
{
    let total = params.total_values();
    if total == 0 {
        return Err(Error::contract("finite_diff_check on empty store"));
    }
    let mut work = params.clone();
    let mut report = GradCheckReport {
        worst_rel_err: 0.0,
        samples,
        worst_param: String::new(),
        worst_index: 0,
    };
    for _ in 0..samples {
        let flat = rng.range(total);
        let (name, offset) = params.locate(flat);
        let name = name.to_string();
        let orig = params.value(&name).data()[offset];
        let analytic = params.grad(&name).data()[offset];

        work.value_mut(&name).data_mut()[offset] = orig + eps;
        let up = loss_fn(&work)?;
        work.value_mut(&name).data_mut()[offset] = orig - eps;
        let down = loss_fn(&work)?;
        work.value_mut(&name).data_mut()[offset] = orig;

        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at perturbed {name}[{offset}]: {up} / {down}"
            )));
        }
        let numeric = (up - down) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        if rel > report.worst_rel_err {
            report.worst_rel_err = rel;
            report.worst_param = name;
            report.worst_index = offset;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arraymath::draw_normal;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut store = ParamStore::<f64>::new();
        store.insert("b", DenseArray::zeros(&[2])).unwrap();
        store.insert("a", DenseArray::zeros(&[3])).unwrap();
        assert!(store.insert("a", DenseArray::zeros(&[1])).is_err());
        assert_eq!(store.names(), vec!["a".to_string(), "b".to_string()]);
        assert_eq!(store.total_values(), 5);
        let (name, off) = store.locate(4);
        assert_eq!((name, off), ("b", 1));
    }

    #[test]
    fn quadratic_gradient_check() {
        // loss = sum x^2 at x = 3, analytic gradient 2x = 6
        let mut store = ParamStore::<f64>::new();
        store
            .insert("x", DenseArray::filled(&[1], 3.0))
            .unwrap();
        store.add_grad("x", &DenseArray::filled(&[1], 6.0));
        let mut rng = RngState::new(1);
        let report = finite_diff_check(
            &store,
            |p| Ok(p.value("x").data().iter().map(|v| v * v).sum()),
            1e-4,
            4,
            &mut rng,
        )
        .unwrap();
        assert!(report.worst_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn linear_gradient_check() {
        let mut rng = RngState::new(7);
        let coeff = draw_normal::<f64>(&mut rng, 10);
        let mut store = ParamStore::<f64>::new();
        store
            .insert("x", draw_normal::<f64>(&mut rng, 10))
            .unwrap();
        store.add_grad("x", &coeff);
        let c = coeff.clone();
        let report = finite_diff_check(
            &store,
            move |p| {
                Ok(p.value("x")
                    .data()
                    .iter()
                    .zip(c.data())
                    .map(|(x, w)| x * w)
                    .sum())
            },
            1e-4,
            10,
            &mut rng,
        )
        .unwrap();
        assert!(report.worst_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn non_finite_loss_is_diagnosed() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", DenseArray::filled(&[1], 1.0)).unwrap();
        let mut rng = RngState::new(3);
        let err = finite_diff_check(&store, |_| Ok(f64::NAN), 1e-4, 1, &mut rng);
        assert!(err.is_err());
    }
}
