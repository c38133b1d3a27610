//! Block masks, the Top-K selector, and prunable weight matrices.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square `block x block` tiling of a `d_in x d_out` weight matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGeometry {
    d_in: usize,
    d_out: usize,
    block: usize,
}

impl BlockGeometry {
    pub fn new(d_in: usize, d_out: usize, block: usize) -> Result<Self> {
        if d_in == 0 || d_out == 0 || block == 0 {
            return Err(Error::Dimension(format!(
                "geometry {d_in}x{d_out} with block {block} has a zero dimension"
            )));
        }
        if !d_in.is_multiple_of(block) || !d_out.is_multiple_of(block) {
            return Err(Error::Dimension(format!(
                "block {block} does not divide {d_in}x{d_out}"
            )));
        }
        Ok(Self { d_in, d_out, block })
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn grid_rows(&self) -> usize {
        self.d_in / self.block
    }

    pub fn grid_cols(&self) -> usize {
        self.d_out / self.block
    }

    pub fn grid_len(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn element_count(&self) -> usize {
        self.d_in * self.d_out
    }
}

/// Binary mask over a block grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BlockMask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} bits do not fill a {rows}x{cols} mask",
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Fraction of grid entries kept.
    pub fn density(&self) -> f64 {
        self.count_ones() as f64 / self.bits.len() as f64
    }
}

/// Number of entries Top-K keeps out of `len` at `keep_fraction`.
pub fn kept_count(keep_fraction: f64, len: usize) -> usize {
    ((keep_fraction * len as f64).round() as usize).min(len)
}

/// Keep the `round(keep_fraction · r·c)` largest scores.
///
/// Ties are broken by ascending row-major index, so the lower index wins.
pub fn topk_mask(score: &Tensor, keep_fraction: f64) -> Result<BlockMask> {
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(Error::Input(format!(
            "keep fraction {keep_fraction} outside [0, 1]"
        )));
    }
    if let Some(bad) = score.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!(
            "score entry {bad} is {}",
            score.data()[bad]
        )));
    }
    let (rows, cols) = score.shape();
    let n = rows * cols;
    let k = kept_count(keep_fraction, n);
    let mut bits = vec![false; n];
    if k == n {
        bits.iter_mut().for_each(|b| *b = true);
    } else if k > 0 {
        let s = score.data();
        let mut order: Vec<usize> = (0..n).collect();
        // Total order: larger score first, then smaller index.
        order.select_nth_unstable_by(k - 1, |&a, &b| {
            s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b))
        });
        for &i in &order[..k] {
            bits[i] = true;
        }
    }
    BlockMask::from_bits(rows, cols, bits)
}

/// Replicate every grid entry over its `d x d` block as a 0/1 matrix.
pub fn expand_block_mask(mask: &BlockMask, geometry: &BlockGeometry) -> Result<Tensor> {
    if mask.rows() != geometry.grid_rows() || mask.cols() != geometry.grid_cols() {
        return Err(Error::Dimension(format!(
            "mask grid {}x{} against geometry grid {}x{}",
            mask.rows(),
            mask.cols(),
            geometry.grid_rows(),
            geometry.grid_cols()
        )));
    }
    let d = geometry.block();
    let mut out = Tensor::zeros(geometry.d_in(), geometry.d_out());
    for r in 0..geometry.d_in() {
        for c in 0..geometry.d_out() {
            if mask.get(r / d, c / d) {
                out.set(r, c, 1.0);
            }
        }
    }
    Ok(out)
}

/// A weight matrix with its importance scores, block geometry, threshold
/// index and current mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunableMatrix {
    name: String,
    weight: Tensor,
    score: Tensor,
    geometry: BlockGeometry,
    threshold_index: usize,
    mask: BlockMask,
    stale: bool,
}

/// Upper bound of the uniform score initialisation.
pub const SCORE_INIT_MAX: f64 = 1e-2;

impl PrunableMatrix {
    /// Starts with an all-one mask and scores drawn uniformly from `[0, 1e-2]`.
    pub fn new<R: Rng>(
        name: impl Into<String>,
        weight: Tensor,
        block: usize,
        threshold_index: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let geometry = BlockGeometry::new(weight.rows(), weight.cols(), block)?;
        let (r, c) = (geometry.grid_rows(), geometry.grid_cols());
        let data = (0..r * c).map(|_| rng.gen_range(0.0..=SCORE_INIT_MAX)).collect();
        let score = Tensor::from_vec(r, c, data)?;
        Self::from_parts(name, weight, score, geometry, threshold_index, BlockMask::ones(r, c))
    }

    pub fn from_parts(
        name: impl Into<String>,
        weight: Tensor,
        score: Tensor,
        geometry: BlockGeometry,
        threshold_index: usize,
        mask: BlockMask,
    ) -> Result<Self> {
        if weight.shape() != (geometry.d_in(), geometry.d_out()) {
            return Err(Error::Dimension(format!(
                "weight {:?} against geometry {}x{}",
                weight.shape(),
                geometry.d_in(),
                geometry.d_out()
            )));
        }
        let grid = (geometry.grid_rows(), geometry.grid_cols());
        if score.shape() != grid || (mask.rows(), mask.cols()) != grid {
            return Err(Error::Dimension(format!(
                "score {:?} / mask {}x{} against grid {grid:?}",
                score.shape(),
                mask.rows(),
                mask.cols()
            )));
        }
        Ok(Self {
            name: name.into(),
            weight,
            score,
            geometry,
            threshold_index,
            mask,
            stale: false,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn score(&self) -> &Tensor {
        &self.score
    }

    pub fn geometry(&self) -> &BlockGeometry {
        &self.geometry
    }

    pub fn threshold_index(&self) -> usize {
        self.threshold_index
    }

    pub fn mask(&self) -> &BlockMask {
        &self.mask
    }

    pub fn is_stale(&self) -> bool {
        self.stale
    }

    /// Mutable weight access; the mask must be refreshed before the next forward.
    pub fn weight_mut(&mut self) -> &mut Tensor {
        self.stale = true;
        &mut self.weight
    }

    /// Mutable score access; the mask must be refreshed before the next forward.
    pub fn score_mut(&mut self) -> &mut Tensor {
        self.stale = true;
        &mut self.score
    }

    pub fn mark_stale(&mut self) {
        self.stale = true;
    }

    /// Replace the mask directly (baseline rules that do not go through Top-K).
    pub fn set_mask(&mut self, mask: BlockMask) -> Result<()> {
        if (mask.rows(), mask.cols()) != (self.geometry.grid_rows(), self.geometry.grid_cols()) {
            return Err(Error::Dimension(format!(
                "mask {}x{} against grid {}x{}",
                mask.rows(),
                mask.cols(),
                self.geometry.grid_rows(),
                self.geometry.grid_cols()
            )));
        }
        self.mask = mask;
        self.stale = false;
        Ok(())
    }

    /// `mask := topk_mask(score, keep_fraction)` and clear the stale flag.
    pub fn refresh_mask(&mut self, keep_fraction: f64) -> Result<()> {
        let mask = topk_mask(&self.score, keep_fraction)?;
        self.set_mask(mask)
    }

    pub fn expanded_mask(&self) -> Tensor {
        expand_block_mask(&self.mask, &self.geometry).expect("mask matches its own geometry")
    }

    /// `expand(mask) ⊙ weight`.
    pub fn effective_weight(&self) -> Tensor {
        self.weight.zip_map(&self.expanded_mask(), |w, m| w * m)
    }
}

/// Graph handles for one prunable matrix during a step.
#[derive(Clone, Copy, Debug)]
pub struct MaskedVars {
    pub weight: Var,
    /// Receives the straight-through score gradient (block grid shape).
    pub gate: Option<Var>,
    /// Scalar keep fraction receiving the straight-through cardinality gradient.
    pub keep: Option<Var>,
}

/// `input · (expand(mask) ⊙ weight)`, recording the straight-through backward rule.
pub fn masked_forward(g: &mut Graph, p: &PrunableMatrix, vars: MaskedVars, input: Var) -> Result<Var> {
    if p.stale {
        return Err(Error::Usage(format!(
            "mask of `{}` is stale; refresh it before the forward pass",
            p.name
        )));
    }
    if g.value(input).cols() != p.geometry.d_in() {
        return Err(Error::Dimension(format!(
            "input with {} columns into `{}` expecting {}",
            g.value(input).cols(),
            p.name,
            p.geometry.d_in()
        )));
    }
    g.masked_matmul(
        input,
        vars.weight,
        p.expanded_mask(),
        p.geometry.block(),
        vars.gate,
        vars.keep,
    )
}

/// Gradients delivered by the straight-through rule for one masked product.
#[derive(Clone, Debug)]
pub struct SteGradients {
    pub weight: Tensor,
    pub score: Tensor,
    pub keep_fraction: f64,
}

/// Pull `upstream` (gradient w.r.t. the masked product) back to weight,
/// scores and keep fraction.
pub fn ste_backward(p: &PrunableMatrix, input: &Tensor, upstream: &Tensor) -> Result<SteGradients> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let vars = MaskedVars {
        weight: g.leaf(p.weight.clone()),
        gate: Some(g.leaf(p.score.clone())),
        keep: Some(g.leaf(Tensor::scalar(1.0))),
    };
    let y = masked_forward(&mut g, p, vars, x)?;
    if g.value(y).shape() != upstream.shape() {
        return Err(Error::Dimension(format!(
            "upstream {:?} against output {:?}",
            upstream.shape(),
            g.value(y).shape()
        )));
    }
    let u = g.constant(upstream.clone());
    let weighted = g.mul(y, u)?;
    let loss = g.sum(weighted);
    g.backward(loss)?;
    let grad = |v: Option<Var>, shape: (usize, usize)| {
        v.and_then(|v| g.grad(v).cloned())
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    };
    Ok(SteGradients {
        weight: grad(Some(vars.weight), p.weight.shape()),
        score: grad(vars.gate, p.score.shape()),
        keep_fraction: grad(vars.keep, (1, 1)).item(),
    })
}

/// The full set of masks in a model, refreshed together once per step.
#[derive(Clone, Debug, Default)]
pub struct MaskSet {
    refreshes: u64,
}

impl MaskSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of completed whole-set refreshes.
    pub fn refreshes(&self) -> u64 {
        self.refreshes
    }

    /// Top-K refresh of every matrix; `keep[i]` belongs to `matrices[i]`.
    pub fn refresh_topk(&mut self, matrices: &mut [&mut PrunableMatrix], keep: &[f64]) -> Result<()> {
        if matrices.len() != keep.len() {
            return Err(Error::Dimension(format!(
                "{} keep fractions for {} matrices",
                keep.len(),
                matrices.len()
            )));
        }
        for (p, &k) in matrices.iter_mut().zip(keep) {
            p.refresh_mask(k)?;
        }
        self.refreshes += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Full-sort reference: sort all indices by (score desc, index asc).
    fn sort_oracle(score: &Tensor, keep: f64) -> Vec<bool> {
        let s = score.data();
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
        let k = (keep * s.len() as f64).round() as usize;
        let mut bits = vec![false; s.len()];
        for &i in &idx[..k] {
            bits[i] = true;
        }
        bits
    }

    fn matrix(d_in: usize, d_out: usize, block: usize, seed: u64) -> PrunableMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::uniform(d_in, d_out, 1.0, &mut rng);
        PrunableMatrix::new("w", w, block, 0, &mut rng).unwrap()
    }

    #[test]
    fn topk_examples() {
        let s = Tensor::from_rows(&[&[0.9, 0.1], &[0.5, 0.7]]).unwrap();
        let m = topk_mask(&s, 0.5).unwrap();
        assert_eq!(m.bits(), &[true, false, false, true]);
        assert_eq!(topk_mask(&s, 1.0).unwrap(), BlockMask::ones(2, 2));
        assert_eq!(topk_mask(&s, 0.0).unwrap(), BlockMask::zeros(2, 2));
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let s = Tensor::from_rows(&[&[1.0, 1.0, 1.0], &[1.0, 0.0, 1.0]]).unwrap();
        let m = topk_mask(&s, 0.5).unwrap();
        assert_eq!(m.bits(), &[true, true, true, false, false, false]);
    }

    #[test]
    fn topk_rejects_bad_input() {
        let s = Tensor::from_vec(1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(topk_mask(&s, 0.5), Err(Error::Input(_))));
        let s = Tensor::zeros(1, 2);
        assert!(matches!(topk_mask(&s, 1.5), Err(Error::Input(_))));
        assert!(matches!(topk_mask(&s, -0.1), Err(Error::Input(_))));
    }

    #[test]
    fn expand_examples() {
        let g = BlockGeometry::new(2, 4, 2).unwrap();
        let m = BlockMask::from_bits(1, 2, vec![true, false]).unwrap();
        let e = expand_block_mask(&m, &g).unwrap();
        assert_eq!(e.data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);

        let g1 = BlockGeometry::new(2, 3, 1).unwrap();
        let m1 = BlockMask::from_bits(2, 3, vec![true, false, true, false, false, true]).unwrap();
        let e1 = expand_block_mask(&m1, &g1).unwrap();
        assert_eq!(e1.data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);

        assert_eq!(
            expand_block_mask(&BlockMask::ones(1, 2), &g).unwrap(),
            Tensor::ones(2, 4)
        );
        assert!(matches!(
            expand_block_mask(&BlockMask::ones(2, 2), &g),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn geometry_must_tile() {
        assert!(BlockGeometry::new(64, 64, 32).is_ok());
        assert!(matches!(BlockGeometry::new(64, 48, 32), Err(Error::Dimension(_))));
    }

    #[test]
    fn refresh_counts_and_determinism() {
        let mut p = matrix(4, 4, 2, 1);
        p.refresh_mask(0.25).unwrap();
        assert_eq!(p.mask().count_ones(), 1);
        let first = p.mask().clone();
        p.refresh_mask(0.25).unwrap();
        assert_eq!(p.mask(), &first);
        p.refresh_mask(1.0).unwrap();
        assert_eq!(p.mask(), &BlockMask::ones(2, 2));
    }

    #[test]
    fn stale_mask_blocks_forward() {
        let mut p = matrix(3, 2, 1, 2);
        p.weight_mut().data_mut()[0] += 1.0;
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(2, 3));
        let vars = MaskedVars {
            weight: g.leaf(p.weight().clone()),
            gate: None,
            keep: None,
        };
        assert!(matches!(masked_forward(&mut g, &p, vars, x), Err(Error::Usage(_))));
        p.refresh_mask(1.0).unwrap();
        assert!(masked_forward(&mut g, &p, vars, x).is_ok());
        let bad = g.constant(Tensor::ones(2, 2));
        assert!(matches!(masked_forward(&mut g, &p, vars, bad), Err(Error::Dimension(_))));
    }

    fn forward_value(p: &PrunableMatrix, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let vars = MaskedVars {
            weight: g.constant(p.weight().clone()),
            gate: None,
            keep: None,
        };
        let y = masked_forward(&mut g, p, vars, xv).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn masked_forward_matches_independent_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = matrix(8, 4, 2, 3);
        let x = Tensor::uniform(5, 8, 1.0, &mut rng);

        p.refresh_mask(1.0).unwrap();
        let dense = x.matmul(p.weight()).unwrap();
        assert_eq!(forward_value(&p, &x), dense);

        p.refresh_mask(0.0).unwrap();
        assert!(forward_value(&p, &x).data().iter().all(|v| *v == 0.0));

        p.refresh_mask(0.5).unwrap();
        // Zero the pruned entries by walking blocks directly, then triple-loop.
        let d = 2;
        let mut w = p.weight().clone();
        for r in 0..8 {
            for c in 0..4 {
                if !p.mask().get(r / d, c / d) {
                    w.set(r, c, 0.0);
                }
            }
        }
        let y = forward_value(&p, &x);
        for i in 0..5 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..8 {
                    acc += x.get(i, k) * w.get(k, j);
                }
                assert!((y.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ste_gradients_hand_derived_2x2() {
        // y = x · W with all-ones mask, d = 1; loss = Σ u ⊙ y.
        // dL/dW = xᵀu, so dS = W ⊙ (xᵀu) and dk = Σ W ⊙ (xᵀu).
        let w = Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]).unwrap();
        let score = Tensor::from_rows(&[&[0.1, 0.2], &[0.3, 0.4]]).unwrap();
        let geom = BlockGeometry::new(2, 2, 1).unwrap();
        let p = PrunableMatrix::from_parts("w", w, score, geom, 0, BlockMask::ones(2, 2)).unwrap();
        let x = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let u = Tensor::from_rows(&[&[3.0, -1.0]]).unwrap();
        let g = ste_backward(&p, &x, &u).unwrap();
        // xᵀu = [[3, -1], [6, -2]]
        assert_eq!(g.weight.data(), &[3.0, -1.0, 6.0, -2.0]);
        assert_eq!(g.score.data(), &[3.0, 2.0, 3.0, -6.0]);
        assert_eq!(g.keep_fraction, 2.0);
    }

    #[test]
    fn ste_masked_entries_get_zero_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = matrix(4, 6, 2, 5);
        p.refresh_mask(0.5).unwrap();
        let x = Tensor::uniform(3, 4, 1.0, &mut rng);
        let u = Tensor::uniform(3, 6, 1.0, &mut rng);
        let g = ste_backward(&p, &x, &u).unwrap();
        let m = p.expanded_mask();
        let full = x.t_matmul(&u).unwrap();
        for i in 0..m.len() {
            if m.data()[i] == 0.0 {
                assert_eq!(g.weight.data()[i], 0.0);
            } else {
                assert!((g.weight.data()[i] - full.data()[i]).abs() < 1e-12);
            }
        }
        // score gradient is block sum of W ⊙ xᵀu, independent of the mask
        let wg = p.weight().zip_map(&full, |a, b| a * b);
        for br in 0..2 {
            for bc in 0..3 {
                let mut acc = 0.0;
                for r in 0..2 {
                    for c in 0..2 {
                        acc += wg.get(br * 2 + r, bc * 2 + c);
                    }
                }
                assert!((g.score.get(br, bc) - acc).abs() < 1e-12);
            }
        }
        assert!((g.keep_fraction - wg.sum()).abs() < 1e-12);
    }

    #[test]
    fn ste_kept_entries_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = matrix(3, 3, 1, 7);
        p.refresh_mask(0.6).unwrap();
        let x = Tensor::uniform(2, 3, 1.0, &mut rng);
        let u = Tensor::uniform(2, 3, 1.0, &mut rng);
        let g = ste_backward(&p, &x, &u).unwrap();
        let loss = |p: &PrunableMatrix| {
            let y = x.matmul(&p.effective_weight()).unwrap();
            y.zip_map(&u, |a, b| a * b).sum()
        };
        let h = 1e-5;
        for i in 0..9 {
            if !p.mask().bits()[i] {
                continue;
            }
            let mut plus = p.clone();
            plus.weight_mut().data_mut()[i] += h;
            let mut minus = p.clone();
            minus.weight_mut().data_mut()[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = g.weight.data()[i];
            assert!((a - fd).abs() <= 1e-6_f64.max(1e-4 * fd.abs()));
        }
    }

    #[test]
    fn mask_set_refreshes_every_matrix() {
        let mut a = matrix(4, 4, 1, 10);
        let mut b = matrix(4, 8, 2, 11);
        let mut set = MaskSet::new();
        set.refresh_topk(&mut [&mut a, &mut b], &[0.5, 0.25]).unwrap();
        assert_eq!(a.mask().count_ones(), 8);
        assert_eq!(b.mask().count_ones(), 2);
        assert_eq!(set.refreshes(), 1);
        assert!(set.refresh_topk(&mut [&mut a], &[0.5, 0.5]).is_err());
    }

    proptest! {
        #[test]
        fn topk_count_is_exact(rows in 1usize..=64, cols in 1usize..=64, keep in 0.0f64..=1.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Tensor::uniform(rows, cols, 1.0, &mut rng);
            let m = topk_mask(&s, keep).unwrap();
            prop_assert_eq!(m.count_ones(), (keep * (rows * cols) as f64).round() as usize);
        }

        #[test]
        fn topk_agrees_with_sort_oracle(rows in 1usize..=16, cols in 1usize..=16, keep in 0.0f64..=1.0, seed in any::<u64>(), coarse in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = Tensor::uniform(rows, cols, 1.0, &mut rng);
            if coarse {
                // force many ties
                s = s.map(|v| (v * 3.0).round());
            }
            let got = topk_mask(&s, keep).unwrap();
            prop_assert_eq!(got.bits(), &sort_oracle(&s, keep)[..]);
        }

        #[test]
        fn topk_invariant_under_increasing_maps(rows in 1usize..=12, cols in 1usize..=12, keep in 0.0f64..=1.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Tensor::uniform(rows, cols, 1.0, &mut rng);
            let base = topk_mask(&s, keep).unwrap();
            prop_assert_eq!(&topk_mask(&s.map(|v| v * 7.0 + 3.0), keep).unwrap(), &base);
            prop_assert_eq!(&topk_mask(&s.map(|v| v.exp()), keep).unwrap(), &base);
            prop_assert_eq!(&topk_mask(&s.map(|v| v * v * v), keep).unwrap(), &base);
        }

        #[test]
        fn expanded_blocks_are_uniform(block in prop::sample::select(vec![1usize, 2, 4, 8]), gr in 1usize..=4, gc in 1usize..=4, keep in 0.0f64..=1.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Tensor::uniform(gr, gc, 1.0, &mut rng);
            let m = topk_mask(&s, keep).unwrap();
            let g = BlockGeometry::new(gr * block, gc * block, block).unwrap();
            let e = expand_block_mask(&m, &g).unwrap();
            for r in 0..gr * block {
                for c in 0..gc * block {
                    let first = e.get((r / block) * block, (c / block) * block);
                    prop_assert_eq!(e.get(r, c), first);
                }
            }
        }

        #[test]
        fn unit_blocks_match_elementwise_reference(rows in 1usize..=8, cols in 1usize..=8, keep in 0.0f64..=1.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Tensor::uniform(rows, cols, 1.0, &mut rng);
            let mut p = PrunableMatrix::new("w", w.clone(), 1, 0, &mut rng).unwrap();
            p.refresh_mask(keep).unwrap();
            let reference: Vec<f64> = w
                .data()
                .iter()
                .zip(p.mask().bits())
                .map(|(v, b)| if *b { *v } else { 0.0 })
                .collect();
            let eff = p.effective_weight();
            prop_assert_eq!(eff.data(), &reference[..]);
        }
    }
}
