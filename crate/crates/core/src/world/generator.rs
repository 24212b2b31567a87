use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::codec::{PatchBasis, PatchGeometry};
use crate::error::{LensError, Result};
use crate::numerics::{RngState, Tensor};

/// How the generator reads its input latent.
#[derive(Clone, Debug, PartialEq)]
pub enum GeneratorKind {
    /// Two-layer tanh network on the flattened latent.
    Mlp,
    /// The same network fed only the listed PCA coefficients of each patch.
    /// Other coefficients are never read.
    Select { kept: Vec<usize> },
    /// x = z.
    Identity,
}

/// Frozen stand-in for a pretrained generator: x = tanh(z W1 + b1) W2 + b2.
#[derive(Clone, Debug)]
pub struct ToyGenerator {
    kind: GeneratorKind,
    geometry: PatchGeometry,
    feature_dim: usize,
    w1: Arc<Tensor>,
    b1: Arc<Tensor>,
    w2: Arc<Tensor>,
    b2: Arc<Tensor>,
    /// Select only: kept basis columns (d×j) and the first layer expressed in
    /// coefficient space ((N·j)×hidden).
    selected: Option<(Arc<Tensor>, Arc<Tensor>)>,
    /// V, for feeding full coefficient matrices to latent-reading kinds.
    basis_t: Option<Arc<Tensor>>,
}

impl ToyGenerator {
    pub fn mlp(
        geometry: PatchGeometry,
        hidden: usize,
        feature_dim: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        if hidden == 0 || feature_dim == 0 {
            return Err(LensError::Config(
                "generator hidden and feature dims must be ≥ 1".into(),
            ));
        }
        let n_in = geometry.latent_len();
        let w1 = Tensor::matrix(
            n_in,
            hidden,
            scaled(rng.normals(n_in * hidden), 1.0 / (n_in as f64).sqrt()),
        )?;
        let b1 = Tensor::matrix(1, hidden, scaled(rng.normals(hidden), 0.1))?;
        let w2 = Tensor::matrix(
            hidden,
            feature_dim,
            scaled(
                rng.normals(hidden * feature_dim),
                1.0 / (hidden as f64).sqrt(),
            ),
        )?;
        let b2 = Tensor::matrix(1, feature_dim, scaled(rng.normals(feature_dim), 0.1))?;
        Ok(Self {
            kind: GeneratorKind::Mlp,
            geometry,
            feature_dim,
            w1: Arc::new(w1),
            b1: Arc::new(b1),
            w2: Arc::new(w2),
            b2: Arc::new(b2),
            selected: None,
            basis_t: None,
        })
    }

    pub fn identity(geometry: PatchGeometry) -> Self {
        let empty = Arc::new(Tensor::zeros(&[0]));
        Self {
            kind: GeneratorKind::Identity,
            geometry,
            feature_dim: geometry.latent_len(),
            w1: Arc::clone(&empty),
            b1: Arc::clone(&empty),
            w2: Arc::clone(&empty),
            b2: empty,
            selected: None,
            basis_t: None,
        }
    }

    /// Attaches a basis so full coefficient matrices can be fed in. For
    /// `kept = Some(..)` the generator becomes coefficient-selecting.
    pub fn with_basis(mut self, basis: &PatchBasis, kept: Option<Vec<usize>>) -> Result<Self> {
        if basis.geometry() != self.geometry {
            return Err(LensError::invalid(format!(
                "basis geometry {:?} does not match generator geometry {:?}",
                basis.geometry(),
                self.geometry
            )));
        }
        self.basis_t = Some(Arc::new(basis.vectors().transpose()?));
        let Some(kept) = kept else {
            return Ok(self);
        };
        if self.kind != GeneratorKind::Mlp {
            return Err(LensError::invalid(
                "only the MLP generator can select coefficients",
            ));
        }
        let d = basis.dim();
        if kept.is_empty() || kept.iter().any(|&i| i >= d) {
            return Err(LensError::invalid(format!(
                "kept coefficients must lie in 0..{d}"
            )));
        }
        let v = basis.vectors();
        let sel = Tensor::from_fn(d, kept.len(), |i, j| v.get(i, kept[j]));
        // Row (p, j) of the coefficient-space first layer is the latent-space
        // first layer contracted with basis column kept[j] placed in patch p.
        let unfold = self.geometry.unfold_indices();
        let hidden = self.w1.cols();
        let n = self.geometry.n_patches();
        let mut w1_sel = vec![0.0; n * kept.len() * hidden];
        for p in 0..n {
            for (jj, &col) in kept.iter().enumerate() {
                let out = &mut w1_sel[(p * kept.len() + jj) * hidden..][..hidden];
                for pos in 0..d {
                    let coef = v.get(pos, col);
                    let row = self.w1.row(unfold[p * d + pos]);
                    for (o, w) in out.iter_mut().zip(row) {
                        *o += coef * w;
                    }
                }
            }
        }
        let w1_sel = Tensor::matrix(n * kept.len(), hidden, w1_sel)?;
        self.selected = Some((Arc::new(sel), Arc::new(w1_sel)));
        self.kind = GeneratorKind::Select { kept };
        Ok(self)
    }

    pub fn kind(&self) -> &GeneratorKind {
        &self.kind
    }

    /// Whether [`Self::forward_coeffs`] reads coefficients in `basis`.
    pub fn uses_basis(&self, basis: &PatchBasis) -> bool {
        match (&self.basis_t, basis.vectors().transpose()) {
            (Some(bt), Ok(t)) => **bt == t,
            _ => false,
        }
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.geometry
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Number of frozen weights θ.
    pub fn param_count(&self) -> usize {
        match self.kind {
            GeneratorKind::Identity => 0,
            _ => self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len(),
        }
    }

    pub fn first_layer_bias(&self) -> &Tensor {
        &self.b1
    }

    pub fn second_layer(&self) -> (&Tensor, &Tensor) {
        (&self.w2, &self.b2)
    }

    /// Hidden activations to features.
    fn head(&self, tape: &mut Tape, pre: Var) -> Result<Var> {
        let b1 = tape.leaf(Arc::clone(&self.b1), false);
        let w2 = tape.leaf(Arc::clone(&self.w2), false);
        let b2 = tape.leaf(Arc::clone(&self.b2), false);
        let h = tape.add_row(pre, b1)?;
        let h = tape.tanh(h)?;
        let x = tape.matmul(h, w2)?;
        tape.add_row(x, b2)
    }

    /// `coeffs` is (B·N)×j holding the kept coefficients in order.
    fn select_head(&self, tape: &mut Tape, coeffs: Var, batch: usize) -> Result<Var> {
        let (_, w1_sel) = self.selected.as_ref().expect("select generator");
        let flat = tape.reshape(coeffs, &[batch, w1_sel.rows()])?;
        let w1 = tape.leaf(Arc::clone(w1_sel), false);
        let pre = tape.matmul(flat, w1)?;
        self.head(tape, pre)
    }

    /// B×(C·H·W) latents to B×m features.
    pub fn forward_latent(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        let len = self.geometry.latent_len();
        if shape.len() != 2 || shape[1] != len {
            return Err(LensError::shape(
                "generator",
                &[shape.first().copied().unwrap_or(0), len],
                &shape,
            ));
        }
        let batch = shape[0];
        match &self.kind {
            GeneratorKind::Identity => Ok(z),
            GeneratorKind::Mlp => {
                let w1 = tape.leaf(Arc::clone(&self.w1), false);
                let pre = tape.matmul(z, w1)?;
                self.head(tape, pre)
            }
            GeneratorKind::Select { .. } => {
                let (sel, _) = self.selected.as_ref().expect("select generator");
                let n = self.geometry.n_patches();
                let d = self.geometry.patch_dim();
                let unfold = self.geometry.unfold_indices();
                let idx: Vec<usize> = (0..batch)
                    .flat_map(|b| unfold.iter().map(move |&i| b * len + i))
                    .collect();
                let patches = tape.gather(z, Arc::new(idx), &[batch * n, d])?;
                let sel = tape.leaf(Arc::clone(sel), false);
                let coeffs = tape.matmul(patches, sel)?;
                self.select_head(tape, coeffs, batch)
            }
        }
    }

    /// (B·N)×d full PCA coefficients (zero mean) to B×m features.
    pub fn forward_coeffs(&self, tape: &mut Tape, w: Var) -> Result<Var> {
        let n = self.geometry.n_patches();
        let d = self.geometry.patch_dim();
        let shape = tape.shape(w).to_vec();
        if shape.len() != 2 || shape[1] != d || !shape[0].is_multiple_of(n) {
            return Err(LensError::shape("generator coefficients", &[n, d], &shape));
        }
        let batch = shape[0] / n;
        if let GeneratorKind::Select { kept } = &self.kind {
            let idx: Vec<usize> = (0..batch * n)
                .flat_map(|r| kept.iter().map(move |&c| r * d + c))
                .collect();
            let coeffs = tape.gather(w, Arc::new(idx), &[batch * n, kept.len()])?;
            return self.select_head(tape, coeffs, batch);
        }
        let vt = self
            .basis_t
            .as_ref()
            .ok_or_else(|| LensError::invalid("generator has no basis attached"))?;
        let vt = tape.leaf(Arc::clone(vt), false);
        let patches = tape.matmul(w, vt)?;
        let fold = self.geometry.fold_indices();
        let block = n * d;
        let idx: Vec<usize> = (0..batch)
            .flat_map(|b| fold.iter().map(move |&i| b * block + i))
            .collect();
        let z = tape.gather(patches, Arc::new(idx), &[batch, self.geometry.latent_len()])?;
        self.forward_latent(tape, z)
    }

    /// Features of a single latent, given as C×H×W or flat.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let len = self.geometry.latent_len();
        if z.len() != len {
            return Err(LensError::shape(
                "generate",
                &self.geometry.latent_shape(),
                z.shape(),
            ));
        }
        let mut tape = Tape::new();
        let z = tape.constant(z.reshape(&[1, len])?);
        let x = self.forward_latent(&mut tape, z)?;
        tape.value(x).reshape(&[self.feature_dim])
    }
}

fn scaled(mut v: Vec<f64>, s: f64) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x *= s);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradient, FD_STEP};
    use crate::codec::{proj_full, recon_full};
    use crate::numerics::random_orthonormal;

    fn small() -> (PatchGeometry, ToyGenerator) {
        let g = PatchGeometry::new(1, 4, 2, 2).unwrap();
        let mut rng = RngState::new(10);
        (g, ToyGenerator::mlp(g, 6, 3, &mut rng).unwrap())
    }

    #[test]
    fn zero_input_gives_bias_image() {
        let (g, gen) = small();
        let x = gen.generate(&Tensor::zeros(&g.latent_shape())).unwrap();
        let (w2, b2) = gen.second_layer();
        let h = gen.first_layer_bias().map(f64::tanh);
        let expect = h.matmul(w2).unwrap().add(b2).unwrap();
        assert_eq!(x.data(), expect.data());
    }

    #[test]
    fn deterministic() {
        let (g, gen) = small();
        let mut rng = RngState::new(1);
        let z = Tensor::new(g.latent_shape().to_vec(), rng.normals(8)).unwrap();
        assert_eq!(gen.generate(&z).unwrap(), gen.generate(&z).unwrap());
        assert!(gen.generate(&Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (g, gen) = small();
        let mut rng = RngState::new(2);
        let z = Tensor::matrix(1, 8, rng.normals(g.latent_len())).unwrap();
        let dir = Tensor::matrix(1, 3, rng.normals(3)).unwrap();
        let report = check_gradient(
            &[z],
            |tape, v| {
                let x = gen.forward_latent(tape, v[0])?;
                let d = tape.constant(dir.clone());
                let y = tape.mul(x, d)?;
                tape.sum(y)
            },
            FD_STEP,
            None,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn select_matches_masked_projection() {
        let g = PatchGeometry::new(1, 4, 4, 2).unwrap();
        let mut rng = RngState::new(3);
        let v = random_orthonormal(4, &mut rng).unwrap();
        let basis = PatchBasis::from_orthonormal(g, v, 4).unwrap();
        let mlp = ToyGenerator::mlp(g, 5, 3, &mut rng).unwrap();
        let sel = mlp.clone().with_basis(&basis, Some(vec![0, 2])).unwrap();
        let z = Tensor::new(g.latent_shape().to_vec(), rng.normals(16)).unwrap();
        // reference: zero the unkept coefficients, reconstruct, run the MLP
        let mut w = proj_full(&z, &basis).unwrap();
        for p in 0..4 {
            w.set(p, 1, 0.0);
            w.set(p, 3, 0.0);
        }
        let masked = recon_full(&w, &basis).unwrap();
        let expect = mlp.generate(&masked).unwrap();
        let got = sel.generate(&z).unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-12);

        let mut tape = Tape::new();
        let wv = tape.constant(w);
        let x = sel.forward_coeffs(&mut tape, wv).unwrap();
        assert!(tape.value(x).reshape(&[3]).unwrap().max_abs_diff(&expect) < 1e-12);
    }
}
