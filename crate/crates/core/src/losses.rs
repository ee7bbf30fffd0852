//! Training objectives and label-mixing augmentations, each with an analytic
//! gradient.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{shape, Error, Result};
use crate::numerics::{dot, norm, softmax_ce_soft, Matrix, ZERO_NORM_THRESHOLD};

pub const DEFAULT_LAMBDA_ORTHO: f64 = 0.1;
pub const DEFAULT_MIX_PROBABILITY: f64 = 0.4;
pub const DEFAULT_MIX_ALPHA: f64 = 1.0;
pub const DEFAULT_MIXUP_SHARE: f64 = 0.5;
pub const DEFAULT_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainLossConfig {
    /// Weight of the orthogonality term.
    pub lambda_ortho: f64,
    /// Probability that a batch is augmented by mixup or cutmix.
    pub mix_probability: f64,
    /// Beta(α, α) parameter for the interpolation weight.
    pub mix_alpha: f64,
    /// Fraction of augmented batches that use mixup rather than cutmix.
    pub mixup_share: f64,
    /// Margin of the multi-margin loss.
    pub margin: f64,
}

impl Default for PretrainLossConfig {
    fn default() -> Self {
        Self {
            lambda_ortho: DEFAULT_LAMBDA_ORTHO,
            mix_probability: DEFAULT_MIX_PROBABILITY,
            mix_alpha: DEFAULT_MIX_ALPHA,
            mixup_share: DEFAULT_MIXUP_SHARE,
            margin: DEFAULT_MARGIN,
        }
    }
}

impl PretrainLossConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !(self.lambda_ortho >= 0.0 && self.lambda_ortho.is_finite()) {
            return Err(Error::InvalidConfig("lambda_ortho must be a finite nonnegative number".into()));
        }
        if !unit.contains(&self.mix_probability) || !unit.contains(&self.mixup_share) {
            return Err(Error::InvalidConfig("mix probabilities must lie in [0, 1]".into()));
        }
        if !(self.mix_alpha > 0.0) || !(self.margin > 0.0) {
            return Err(Error::InvalidConfig("mix_alpha and margin must be positive".into()));
        }
        Ok(())
    }
}

/// Orthogonality penalty `Σᵢⱼ (Gᵢⱼ − Iᵢⱼ)²` over the `B×B` Gram matrix of the
/// row-normalized batch, with its gradient w.r.t. the unnormalized rows.
pub fn ortho_loss(theta_pb: &Matrix) -> Result<(f64, Matrix)> {
    let b = theta_pb.rows();
    if b < 2 {
        return Err(shape("orthogonality loss needs a batch of at least two rows"));
    }
    let norms: Vec<f64> = (0..b).map(|i| norm(theta_pb.row(i))).collect();
    if norms.iter().any(|&n| n < ZERO_NORM_THRESHOLD) {
        return Err(Error::ZeroNorm);
    }
    let mut unit = theta_pb.clone();
    for (i, &n) in norms.iter().enumerate() {
        unit.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    let mut residual = Matrix::zeros(b, b);
    let mut loss = 0.0;
    for i in 0..b {
        for j in 0..b {
            let g = dot(unit.row(i), unit.row(j)) - if i == j { 1.0 } else { 0.0 };
            residual.set(i, j, g);
            loss += g * g;
        }
    }
    // dL/du_i = 4 Σ_j R_ij u_j (R symmetric), then project out the radial
    // component and divide by the row norm.
    let mut grad = Matrix::zeros(b, theta_pb.cols());
    for i in 0..b {
        let mut gu = vec![0.0; theta_pb.cols()];
        for j in 0..b {
            let r = 4.0 * residual.get(i, j);
            for (g, &u) in gu.iter_mut().zip(unit.row(j)) {
                *g += r * u;
            }
        }
        let ui = unit.row(i);
        let radial = dot(ui, &gu);
        for ((g, &u), out) in gu.iter().zip(ui).zip(grad.row_mut(i)) {
            *out = (g - radial * u) / norms[i];
        }
    }
    Ok((loss, grad))
}

/// Mean absolute off-diagonal entry of the normalized Gram matrix.
pub fn mean_offdiag_gram(features: &Matrix) -> Result<f64> {
    let b = features.rows();
    if b < 2 {
        return Err(shape("need at least two feature rows"));
    }
    let norms: Vec<f64> = (0..b).map(|i| norm(features.row(i))).collect();
    if norms.iter().any(|&n| n < ZERO_NORM_THRESHOLD) {
        return Err(Error::ZeroNorm);
    }
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i != j {
                total += (dot(features.row(i), features.row(j)) / (norms[i] * norms[j])).abs();
            }
        }
    }
    Ok(total / (b * (b - 1)) as f64)
}

/// Loss terms and gradients of one pretraining batch.
#[derive(Debug, Clone)]
pub struct PretrainLoss {
    pub total: f64,
    /// Batch-mean cross-entropy.
    pub ce: f64,
    /// Unweighted orthogonality term; zero when `lambda_ortho == 0`.
    pub ortho: f64,
    pub grad_logits: Matrix,
    pub grad_features: Matrix,
}

/// `L_pre = L_ce + λ_ortho · L_ortho` over a batch.
///
/// `targets` are probability vectors (one-hot for plain samples, mixed for
/// augmented ones). The cross-entropy is averaged over the batch.
pub fn pretrain_loss(
    logits: &Matrix,
    targets: &[Vec<f64>],
    theta_pb: &Matrix,
    cfg: &PretrainLossConfig,
) -> Result<PretrainLoss> {
    let b = logits.rows();
    if targets.len() != b || theta_pb.rows() != b {
        return Err(shape(format!(
            "batch of {b} logits with {} targets and {} feature rows",
            targets.len(),
            theta_pb.rows()
        )));
    }
    let inv_b = 1.0 / b as f64;
    let mut ce = 0.0;
    let mut grad_logits = Matrix::zeros(b, logits.cols());
    for (i, t) in targets.iter().enumerate() {
        let (l, g) = softmax_ce_soft(logits.row(i), t)?;
        ce += l;
        for (o, gi) in grad_logits.row_mut(i).iter_mut().zip(g) {
            *o = gi * inv_b;
        }
    }
    ce *= inv_b;
    let (ortho, mut grad_features) = if cfg.lambda_ortho == 0.0 {
        (0.0, Matrix::zeros(b, theta_pb.cols()))
    } else {
        ortho_loss(theta_pb)?
    };
    grad_features
        .data_mut()
        .iter_mut()
        .for_each(|v| *v *= cfg.lambda_ortho);
    Ok(PretrainLoss {
        total: ce + cfg.lambda_ortho * ortho,
        ce,
        ortho,
        grad_logits,
        grad_features,
    })
}

/// Squared multi-margin loss `Σ_{i≠gt} max(0, m − l_gt + l_i)² / |C|`.
///
/// The subgradient at the hinge is zero.
pub fn multi_margin_loss(scores: &[f64], gt: usize, margin: f64) -> Result<(f64, Vec<f64>)> {
    let n = scores.len();
    if gt >= n {
        return Err(shape(format!("ground truth {gt} out of range for {n} scores")));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for i in 0..n {
        if i == gt {
            continue;
        }
        let h = margin - scores[gt] + scores[i];
        if h > 0.0 {
            loss += h * h;
            grad[i] += 2.0 * h * inv_n;
            grad[gt] -= 2.0 * h * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Draws the interpolation weight `λ ~ Beta(α, α)`.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidConfig(format!("mix alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

fn blend(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| lambda * x + (1.0 - lambda) * y).collect()
}

/// Mixup with an explicit weight: `λ·(x1, y1) + (1−λ)·(x2, y2)`.
pub fn mixup_with_lambda(
    x1: &[f64],
    x2: &[f64],
    y1: &[f64],
    y2: &[f64],
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if x1.len() != x2.len() || y1.len() != y2.len() {
        return Err(shape("mixup operands differ in length"));
    }
    Ok((blend(x1, x2, lambda), blend(y1, y2, lambda)))
}

/// Mixup with `λ ~ Beta(α, α)`; returns the mixed pair and the drawn `λ`.
pub fn mixup<R: Rng + ?Sized>(
    x1: &[f64],
    x2: &[f64],
    y1: &[f64],
    y2: &[f64],
    alpha: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let lambda = sample_lambda(alpha, rng)?;
    let (x, y) = mixup_with_lambda(x1, x2, y1, y2, lambda)?;
    Ok((x, y, lambda))
}

/// Layout of a flattened `channels × height × width` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A single-channel strip for inputs without spatial layout.
    pub fn strip(len: usize) -> Self {
        Self {
            channels: 1,
            height: 1,
            width: len,
        }
    }
}

/// Rectangle in grid coordinates, shared by all channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchBox {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    /// Random box covering about `1 − λ` of the grid, clipped at the border.
    pub fn sample<R: Rng + ?Sized>(grid: Grid, lambda: f64, rng: &mut R) -> Self {
        let ratio = (1.0 - lambda).max(0.0).sqrt();
        let cut_h = (grid.height as f64 * ratio) as usize;
        let cut_w = (grid.width as f64 * ratio) as usize;
        let cy = rng.random_range(0..grid.height);
        let cx = rng.random_range(0..grid.width);
        let top = cy.saturating_sub(cut_h / 2);
        let bottom = (cy + cut_h / 2).min(grid.height);
        let left = cx.saturating_sub(cut_w / 2);
        let right = (cx + cut_w / 2).min(grid.width);
        Self {
            top,
            left,
            height: bottom - top,
            width: right - left,
        }
    }
}

/// Pastes `patch` of `x2` into `x1` on every channel; labels mix by the
/// patch's area fraction.
pub fn cutmix_with_box(
    x1: &[f64],
    x2: &[f64],
    y1: &[f64],
    y2: &[f64],
    grid: Grid,
    patch: PatchBox,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if x1.len() != grid.len() || x2.len() != grid.len() {
        return Err(shape(format!(
            "cutmix inputs of length {} and {} for a {}x{}x{} grid",
            x1.len(),
            x2.len(),
            grid.channels,
            grid.height,
            grid.width
        )));
    }
    if y1.len() != y2.len() {
        return Err(shape("cutmix labels differ in length"));
    }
    if patch.top + patch.height > grid.height || patch.left + patch.width > grid.width {
        return Err(shape("cutmix patch exceeds the grid"));
    }
    let mut x = x1.to_vec();
    let plane = grid.height * grid.width;
    for c in 0..grid.channels {
        for r in patch.top..patch.top + patch.height {
            let start = c * plane + r * grid.width + patch.left;
            x[start..start + patch.width].copy_from_slice(&x2[start..start + patch.width]);
        }
    }
    let frac = patch.area() as f64 / plane as f64;
    Ok((x, blend(y1, y2, 1.0 - frac)))
}

/// CutMix with a box sized from `λ ~ Beta(α, α)`.
pub fn cutmix<R: Rng + ?Sized>(
    x1: &[f64],
    x2: &[f64],
    y1: &[f64],
    y2: &[f64],
    grid: Grid,
    alpha: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>, PatchBox)> {
    let lambda = sample_lambda(alpha, rng)?;
    let patch = PatchBox::sample(grid, lambda, rng);
    let (x, y) = cutmix_with_box(x1, x2, y1, y2, grid, patch)?;
    Ok((x, y, patch))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    None,
    Mixup,
    Cutmix,
}

/// Picks at most one of mixup and cutmix for a batch.
pub fn sample_augmentation<R: Rng + ?Sized>(cfg: &PretrainLossConfig, rng: &mut R) -> Augmentation {
    let u: f64 = rng.random();
    if u >= cfg.mix_probability {
        return Augmentation::None;
    }
    let v: f64 = rng.random();
    if v < cfg.mixup_share {
        Augmentation::Mixup
    } else {
        Augmentation::Cutmix
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{one_hot, softmax_ce};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn ortho_loss_vanishes_on_orthonormal_rows() {
        let (loss, grad) = ortho_loss(&Matrix::identity(4)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
        // Orthogonal but not unit rows: still zero after normalization.
        let m = Matrix::new(2, 3, vec![3.0, 0.0, 0.0, 0.0, 0.0, -0.5]).unwrap();
        assert!(ortho_loss(&m).unwrap().0.abs() < 1e-10);
    }

    #[test]
    fn ortho_loss_of_identical_rows() {
        let m = Matrix::new(2, 2, vec![0.6, 0.8, 0.6, 0.8]).unwrap();
        assert!((ortho_loss(&m).unwrap().0 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ortho_loss_errors() {
        assert!(matches!(ortho_loss(&Matrix::identity(1)), Err(Error::ShapeMismatch(_))));
        let m = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(ortho_loss(&m), Err(Error::ZeroNorm)));
    }

    #[test]
    fn ortho_loss_is_row_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let m = random_matrix(&mut rng, 5, 4);
            let mut scaled = m.clone();
            let row = rng.random_range(0..5);
            let c = rng.random_range(0.1..10.0);
            scaled.row_mut(row).iter_mut().for_each(|v| *v *= c);
            let (a, _) = ortho_loss(&m).unwrap();
            let (b, _) = ortho_loss(&scaled).unwrap();
            assert!((a - b).abs() / a < 1e-10);
        }
    }

    #[test]
    fn ortho_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-5;
        for _ in 0..20 {
            let m = random_matrix(&mut rng, 4, 6);
            let (_, g) = ortho_loss(&m).unwrap();
            for k in 0..m.data().len() {
                let mut p = m.clone();
                p.data_mut()[k] += h;
                let mut q = m.clone();
                q.data_mut()[k] -= h;
                let fd = (ortho_loss(&p).unwrap().0 - ortho_loss(&q).unwrap().0) / (2.0 * h);
                let an = g.data()[k];
                assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-6), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn pretrain_loss_degenerate_cases() {
        let logits = Matrix::new(2, 3, vec![0.2, -0.1, 0.5, 1.0, 0.0, -1.0]).unwrap();
        let targets = vec![one_hot(2, 3), one_hot(0, 3)];
        let feats = Matrix::new(2, 2, vec![1.0, 0.2, -0.3, 0.7]).unwrap();
        let cfg0 = PretrainLossConfig {
            lambda_ortho: 0.0,
            ..Default::default()
        };
        let l0 = pretrain_loss(&logits, &targets, &feats, &cfg0).unwrap();
        let ce = (softmax_ce(logits.row(0), 2).unwrap().0 + softmax_ce(logits.row(1), 0).unwrap().0) / 2.0;
        assert_eq!(l0.total, l0.ce);
        assert!((l0.total - ce).abs() < 1e-15);

        let orthonormal = Matrix::identity(2);
        let l = pretrain_loss(&logits, &targets, &orthonormal, &PretrainLossConfig::default()).unwrap();
        assert_eq!(l.total, l.ce);

        let l1 = pretrain_loss(&logits, &targets, &feats, &PretrainLossConfig { lambda_ortho: 1.0, ..cfg0.clone() }).unwrap();
        let l2 = pretrain_loss(&logits, &targets, &feats, &PretrainLossConfig { lambda_ortho: 2.0, ..cfg0 }).unwrap();
        assert!((l2.total - l1.total - l1.ortho).abs() < 1e-12);
    }

    #[test]
    fn multi_margin_examples() {
        assert_eq!(multi_margin_loss(&[1.0, 0.0, 0.0], 0, 0.1).unwrap().0, 0.0);
        let (l, _) = multi_margin_loss(&[0.5, 0.5], 0, 0.1).unwrap();
        assert!((l - 0.005).abs() < 1e-15);
        assert!(multi_margin_loss(&[0.5], 1, 0.1).is_err());
    }

    #[test]
    fn multi_margin_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let c = rng.random_range(-2.0..2.0);
            let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
            let gt = rng.random_range(0..6);
            let a = multi_margin_loss(&s, gt, 0.1).unwrap().0;
            let b = multi_margin_loss(&shifted, gt, 0.1).unwrap().0;
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_margin_gradient_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 50 {
            let s: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..0.3)).collect();
            let gt = rng.random_range(0..5);
            let m = 0.1;
            if (0..5).any(|i| i != gt && (m - s[gt] + s[i]).abs() <= 1e-3) {
                continue;
            }
            let (_, g) = multi_margin_loss(&s, gt, m).unwrap();
            for i in 0..5 {
                let mut p = s.clone();
                p[i] += h;
                let mut q = s.clone();
                q[i] -= h;
                let fd = (multi_margin_loss(&p, gt, m).unwrap().0 - multi_margin_loss(&q, gt, m).unwrap().0) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(g[i].abs()).max(1e-6));
            }
            checked += 1;
        }
    }

    #[test]
    fn mixup_examples() {
        let (x, y) = mixup_with_lambda(&[0.3, 0.4], &[9.0, 9.0], &[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap();
        assert_eq!((x, y), (vec![0.3, 0.4], vec![1.0, 0.0]));
        let (x, _) = mixup_with_lambda(&[0.0, 2.0], &[2.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap();
        assert_eq!(x, vec![1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (_, y, lambda) = mixup(&[1.0], &[2.0], &one_hot(0, 3), &one_hot(2, 3), 1.0, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&lambda));
            assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cutmix_examples() {
        let grid = Grid {
            channels: 2,
            height: 3,
            width: 4,
        };
        let x1 = vec![1.0; 24];
        let x2 = vec![2.0; 24];
        let (y1, y2) = (one_hot(0, 2), one_hot(1, 2));
        let empty = PatchBox { top: 1, left: 1, height: 0, width: 2 };
        assert_eq!(cutmix_with_box(&x1, &x2, &y1, &y2, grid, empty).unwrap(), (x1.clone(), y1.clone()));
        let full = PatchBox { top: 0, left: 0, height: 3, width: 4 };
        assert_eq!(cutmix_with_box(&x1, &x2, &y1, &y2, grid, full).unwrap(), (x2.clone(), y2.clone()));
        let part = PatchBox { top: 1, left: 1, height: 2, width: 3 };
        let (x, y) = cutmix_with_box(&x1, &x2, &y1, &y2, grid, part).unwrap();
        assert_eq!(y[1], 6.0 / 12.0);
        assert_eq!(x.iter().filter(|&&v| v == 2.0).count(), 12);
        assert_eq!(x[12 + 4 + 1], 2.0);
        assert_eq!(x[0], 1.0);
        assert!(cutmix_with_box(&x1[..5], &x2, &y1, &y2, grid, part).is_err());
    }

    #[test]
    fn sampled_cutmix_label_weight_is_area_fraction() {
        let grid = Grid { channels: 1, height: 8, width: 8 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let (x, y, patch) = cutmix(&[0.0; 64], &[1.0; 64], &one_hot(0, 2), &one_hot(1, 2), grid, 1.0, &mut rng).unwrap();
            assert_eq!(y[1], patch.area() as f64 / 64.0);
            assert_eq!(x.iter().sum::<f64>(), patch.area() as f64);
        }
    }

    #[test]
    fn augmentation_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let never = PretrainLossConfig { mix_probability: 0.0, ..Default::default() };
        let always = PretrainLossConfig { mix_probability: 1.0, ..Default::default() };
        for _ in 0..1000 {
            assert_eq!(sample_augmentation(&never, &mut rng), Augmentation::None);
            assert_ne!(sample_augmentation(&always, &mut rng), Augmentation::None);
        }
        let cfg = PretrainLossConfig::default();
        let n = 100_000;
        let (mut mixed, mut mixups) = (0, 0);
        for _ in 0..n {
            match sample_augmentation(&cfg, &mut rng) {
                Augmentation::None => {}
                Augmentation::Mixup => {
                    mixed += 1;
                    mixups += 1;
                }
                Augmentation::Cutmix => mixed += 1,
            }
        }
        assert!((mixed as f64 / n as f64 - 0.4).abs() < 0.01);
        assert!((mixups as f64 / mixed as f64 - 0.5).abs() < 0.02);
    }
}
