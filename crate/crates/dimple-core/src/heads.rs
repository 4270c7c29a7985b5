//! Invariant/spurious projection heads.
//!
//! Four independent linear maps split each modality's joint embedding into an
//! invariant and a spurious component: `phi_v`/`psi_v` for vision and
//! `phi_t`/`psi_t` for text. Outputs are re-normalized to unit L2 so that the
//! downstream similarity logits are literal cosines.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Graph, TensorId};

/// One linear projection `x W + b` bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct LinearHead {
    pub w: TensorId,
    pub b: TensorId,
}

impl LinearHead {
    pub fn apply(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        let h = g.matmul(x, self.w)?;
        g.add_bias(h, self.b)
    }
}

/// The four projection heads. No parameters are shared between them.
#[derive(Clone, Copy, Debug)]
pub struct HeadSet {
    pub phi_v: LinearHead,
    pub psi_v: LinearHead,
    pub phi_t: LinearHead,
    pub psi_t: LinearHead,
}

pub const HEAD_NAMES: [&str; 4] = ["heads.phi_v", "heads.psi_v", "heads.phi_t", "heads.psi_t"];

/// Weight init std for the heads. Near-identity init is deliberately not
/// used: the invariant/spurious pathways must start asymmetric.
pub const HEAD_INIT_STD: f64 = 0.02;

/// Register the four `d_vl -> d_vl` heads (Gaussian weights, zero bias).
pub fn register_heads(store: &mut ParamStore, d_vl: usize, rng: &mut impl Rng) {
    for name in HEAD_NAMES {
        store.insert_normal(&format!("{name}.w"), vec![d_vl, d_vl], HEAD_INIT_STD, rng);
        store.insert_zeros(&format!("{name}.b"), vec![d_vl]);
    }
}

impl HeadSet {
    pub fn bind(bound: &BoundParams) -> Result<Self> {
        let head = |name: &str| -> Result<LinearHead> {
            Ok(LinearHead {
                w: bound.id(&format!("{name}.w"))?,
                b: bound.id(&format!("{name}.b"))?,
            })
        };
        Ok(HeadSet {
            phi_v: head("heads.phi_v")?,
            psi_v: head("heads.psi_v")?,
            phi_t: head("heads.phi_t")?,
            psi_t: head("heads.psi_t")?,
        })
    }
}

/// The four decomposed embedding blocks for a batch, plus its labels.
/// All blocks are row-normalized; `z_v_*` have one row per sample and
/// `z_t_*` one row per class.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    pub z_v_u: TensorId,
    pub z_v_s: TensorId,
    pub z_t_u: TensorId,
    pub z_t_s: TensorId,
    pub labels: Vec<usize>,
}

impl FeatureBundle {
    pub fn num_samples(&self, g: &Graph) -> usize {
        g.shape(self.z_v_u)[0]
    }

    pub fn num_classes(&self, g: &Graph) -> usize {
        g.shape(self.z_t_u)[0]
    }
}

/// Split vision embeddings `z_v [N x d_vl]` and text embeddings
/// `z_t [C x d_vl]` through the four heads and re-normalize each row.
///
/// Inputs are expected unit-normalized (that is the encoders' output
/// contract); a head that maps a row to zero surfaces as a
/// degenerate-projection error.
pub fn decompose(
    g: &mut Graph,
    z_v: TensorId,
    z_t: TensorId,
    heads: &HeadSet,
    labels: &[usize],
) -> Result<FeatureBundle> {
    let (sv, st) = (g.shape(z_v).to_vec(), g.shape(z_t).to_vec());
    if sv.len() != 2 || st.len() != 2 || sv[1] != st[1] {
        return Err(Error::Shape(format!(
            "decompose requires z_v [N x d] and z_t [C x d]; got {sv:?} and {st:?}"
        )));
    }
    let num_classes = st[0];
    if labels.len() != sv[0] {
        return Err(Error::Shape(format!(
            "decompose: {} labels for {} samples",
            labels.len(),
            sv[0]
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Config(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    debug_assert!(rows_unit_norm(g, z_v) && rows_unit_norm(g, z_t), "decompose inputs must be unit-norm");

    let project = |g: &mut Graph, head: &LinearHead, x: TensorId| -> Result<TensorId> {
        let h = head.apply(g, x)?;
        g.normalize_rows(h).map_err(|e| match e {
            Error::ZeroRow { row } => Error::DegenerateProjection(format!(
                "head mapped row {row} to a zero vector"
            )),
            other => other,
        })
    };

    Ok(FeatureBundle {
        z_v_u: project(g, &heads.phi_v, z_v)?,
        z_v_s: project(g, &heads.psi_v, z_v)?,
        z_t_u: project(g, &heads.phi_t, z_t)?,
        z_t_s: project(g, &heads.psi_t, z_t)?,
        labels: labels.to_vec(),
    })
}

fn rows_unit_norm(g: &Graph, id: TensorId) -> bool {
    let d = g.shape(id)[1];
    g.value(id)
        .chunks(d)
        .all(|row| (row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn identity_head_store(d: usize) -> ParamStore {
        let mut store = ParamStore::new();
        for name in HEAD_NAMES {
            let mut eye = vec![0.0; d * d];
            for i in 0..d {
                eye[i * d + i] = 1.0;
            }
            store.insert(&format!("{name}.w"), vec![d, d], eye);
            store.insert_zeros(&format!("{name}.b"), vec![d]);
        }
        store
    }

    fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Vec<f64> {
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(row.iter().map(|v| v / norm));
        }
        data
    }

    #[test]
    fn identity_heads_pass_inputs_through_bitwise() {
        let d = 16;
        let mut rng = crate::rng::substream(2, "test/heads");
        let store = identity_head_store(d);
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let heads = HeadSet::bind(&bound).unwrap();
        let zv_data = unit_rows(&mut rng, 5, d);
        let zt_data = unit_rows(&mut rng, 3, d);
        let z_v = g.leaf(zv_data.clone(), vec![5, d], false).unwrap();
        let z_t = g.leaf(zt_data.clone(), vec![3, d], false).unwrap();
        let bundle = decompose(&mut g, z_v, z_t, &heads, &[0, 1, 2, 0, 1]).unwrap();
        assert_eq!(g.value(bundle.z_v_u), &zv_data[..]);
        assert_eq!(g.value(bundle.z_v_s), &zv_data[..]);
        assert_eq!(g.value(bundle.z_t_u), &zt_data[..]);
        assert_eq!(g.value(bundle.z_t_s), &zt_data[..]);
    }

    #[test]
    fn decompose_is_idempotent_with_identity_heads() {
        let d = 8;
        let mut rng = crate::rng::substream(3, "test/heads-idem");
        let store = identity_head_store(d);
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let heads = HeadSet::bind(&bound).unwrap();
        let z_v = g.leaf(unit_rows(&mut rng, 4, d), vec![4, d], false).unwrap();
        let z_t = g.leaf(unit_rows(&mut rng, 2, d), vec![2, d], false).unwrap();
        let once = decompose(&mut g, z_v, z_t, &heads, &[0, 1, 0, 1]).unwrap();
        let twice = decompose(&mut g, once.z_v_u, once.z_t_u, &heads, &[0, 1, 0, 1]).unwrap();
        assert_eq!(g.value(once.z_v_u), g.value(twice.z_v_u));
        assert_eq!(g.value(once.z_t_u), g.value(twice.z_t_u));
    }

    #[test]
    fn zero_heads_surface_degenerate_projection() {
        let d = 4;
        let mut store = ParamStore::new();
        for name in HEAD_NAMES {
            store.insert_zeros(&format!("{name}.w"), vec![d, d]);
            store.insert_zeros(&format!("{name}.b"), vec![d]);
        }
        let mut rng = crate::rng::substream(4, "test/heads-zero");
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let heads = HeadSet::bind(&bound).unwrap();
        let z_v = g.leaf(unit_rows(&mut rng, 2, d), vec![2, d], false).unwrap();
        let z_t = g.leaf(unit_rows(&mut rng, 2, d), vec![2, d], false).unwrap();
        let err = decompose(&mut g, z_v, z_t, &heads, &[0, 1]).unwrap_err();
        assert!(matches!(err, Error::DegenerateProjection(_)));
    }

    #[test]
    fn random_heads_normalize_and_match_finite_differences() {
        let d = 6;
        let mut rng = crate::rng::substream(5, "test/heads-fd");
        let mut store = ParamStore::new();
        register_heads(&mut store, d, &mut rng);
        let zv_data = unit_rows(&mut rng, 3, d);
        let zt_data = unit_rows(&mut rng, 2, d);
        let labels = [0usize, 1, 1];

        let loss_of = |s: &ParamStore| -> Result<f64> {
            let mut g = Graph::new();
            let bound = s.bind(&mut g)?;
            let heads = HeadSet::bind(&bound)?;
            let z_v = g.leaf(zv_data.clone(), vec![3, d], false)?;
            let z_t = g.leaf(zt_data.clone(), vec![2, d], false)?;
            let b = decompose(&mut g, z_v, z_t, &heads, &labels)?;
            // arbitrary smooth scalar touching all four blocks
            let cat = g.concat_rows(&[b.z_v_u, b.z_v_s])?;
            let cat2 = g.concat_rows(&[b.z_t_u, b.z_t_s])?;
            let s1 = g.sum(cat)?;
            let s2 = g.sum(cat2)?;
            let m = g.mul(s1, s2)?;
            Ok(g.scalar_value(m))
        };

        // row norms
        {
            let mut g = Graph::new();
            let bound = store.bind(&mut g).unwrap();
            let heads = HeadSet::bind(&bound).unwrap();
            let z_v = g.leaf(zv_data.clone(), vec![3, d], false).unwrap();
            let z_t = g.leaf(zt_data.clone(), vec![2, d], false).unwrap();
            let b = decompose(&mut g, z_v, z_t, &heads, &labels).unwrap();
            for id in [b.z_v_u, b.z_v_s, b.z_t_u, b.z_t_s] {
                for row in g.value(id).chunks(d) {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    assert!((norm - 1.0).abs() < 1e-9);
                }
            }
        }

        // analytic vs numeric gradients for every head parameter
        let analytic = {
            let mut g = Graph::new();
            let bound = store.bind(&mut g).unwrap();
            let heads = HeadSet::bind(&bound).unwrap();
            let z_v = g.leaf(zv_data.clone(), vec![3, d], false).unwrap();
            let z_t = g.leaf(zt_data.clone(), vec![2, d], false).unwrap();
            let b = decompose(&mut g, z_v, z_t, &heads, &labels).unwrap();
            let cat = g.concat_rows(&[b.z_v_u, b.z_v_s]).unwrap();
            let cat2 = g.concat_rows(&[b.z_t_u, b.z_t_s]).unwrap();
            let s1 = g.sum(cat).unwrap();
            let s2 = g.sum(cat2).unwrap();
            let m = g.mul(s1, s2).unwrap();
            g.backward(m).unwrap();
            let mut map = std::collections::BTreeMap::new();
            for (name, id) in bound.iter() {
                map.insert(name.to_string(), g.grad(id).unwrap().to_vec());
            }
            map
        };
        let worst = crate::gradcheck::check_store_gradients(&store, &analytic, loss_of, 1e-5).unwrap();
        for (name, err) in worst {
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn cross_gradients_between_heads_are_exactly_zero() {
        let d = 5;
        let mut rng = crate::rng::substream(6, "test/heads-cross");
        let mut store = ParamStore::new();
        register_heads(&mut store, d, &mut rng);
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let heads = HeadSet::bind(&bound).unwrap();
        let z_v = g.leaf(unit_rows(&mut rng, 3, d), vec![3, d], false).unwrap();
        let z_t = g.leaf(unit_rows(&mut rng, 2, d), vec![2, d], false).unwrap();
        let b = decompose(&mut g, z_v, z_t, &heads, &[0, 1, 0]).unwrap();
        // loss reads only the vision-invariant block
        let loss = g.sum(b.z_v_u).unwrap();
        g.backward(loss).unwrap();
        for other in ["heads.psi_v", "heads.phi_t", "heads.psi_t"] {
            let w = bound.id(&format!("{other}.w")).unwrap();
            let grad = g.grad(w).unwrap();
            assert!(grad.iter().all(|&v| v == 0.0), "{other} leaked gradient");
        }
        let phi_w = bound.id("heads.phi_v.w").unwrap();
        assert!(g.grad(phi_w).unwrap().iter().any(|&v| v != 0.0));
    }
}
