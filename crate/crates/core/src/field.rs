//! Grid containers and the discrete operators shared by the solver and the
//! network boundary.
//!
//! Conventions: cell `(i, j)` has its center at the continuous position
//! `(i + 0.5, j + 0.5)`; `i` runs along x (width), `j` along y (height, up).
//! Scalars are stored row-major (`j * width + i`). On the staggered grid the
//! x-face `i` of row `j` sits at `(i, j + 0.5)` and is the left face of cell
//! `i`; the y-face `j` of column `i` sits at `(i + 0.5, j)`.

use crate::error::{ensure, LssError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0)
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == width * height,
            "scalar field {}x{} needs {} values, got {}",
            width,
            height,
            width * height,
            data.len()
        );
        ensure!(data.iter().all(|v| v.is_finite()), "scalar field contains non-finite values");
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for j in 0..height {
            for i in 0..width {
                data.push(f(i, j));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.width + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.width + i] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacField2 {
    width: usize,
    height: usize,
    /// `(width + 1) * height` x-face values.
    pub u_x: Vec<f64>,
    /// `width * (height + 1)` y-face values.
    pub u_y: Vec<f64>,
}

impl MacField2 {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u_x: vec![0.0; (width + 1) * height],
            u_y: vec![0.0; width * (height + 1)],
        }
    }

    pub fn uniform(width: usize, height: usize, vx: f64, vy: f64) -> Self {
        Self {
            width,
            height,
            u_x: vec![vx; (width + 1) * height],
            u_y: vec![vy; width * (height + 1)],
        }
    }

    pub fn from_vecs(width: usize, height: usize, u_x: Vec<f64>, u_y: Vec<f64>) -> Result<Self> {
        ensure!(
            u_x.len() == (width + 1) * height && u_y.len() == width * (height + 1),
            "staggered field {}x{} needs {} x-faces and {} y-faces, got {} and {}",
            width,
            height,
            (width + 1) * height,
            width * (height + 1),
            u_x.len(),
            u_y.len()
        );
        ensure!(
            u_x.iter().chain(&u_y).all(|v| v.is_finite()),
            "staggered field contains non-finite values"
        );
        Ok(Self { width, height, u_x, u_y })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn x_idx(&self, i: usize, j: usize) -> usize {
        j * (self.width + 1) + i
    }

    #[inline]
    pub fn y_idx(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    #[inline]
    pub fn ux(&self, i: usize, j: usize) -> f64 {
        self.u_x[j * (self.width + 1) + i]
    }

    #[inline]
    pub fn uy(&self, i: usize, j: usize) -> f64 {
        self.u_y[j * self.width + i]
    }

    /// Bilinearly interpolated x-component at a continuous position.
    pub fn sample_x(&self, x: f64, y: f64) -> f64 {
        sample_lattice(&self.u_x, self.width + 1, self.height, 0.0, 0.5, x, y)
    }

    /// Bilinearly interpolated y-component at a continuous position.
    pub fn sample_y(&self, x: f64, y: f64) -> f64 {
        sample_lattice(&self.u_y, self.width, self.height + 1, 0.5, 0.0, x, y)
    }

    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        (self.sample_x(x, y), self.sample_y(x, y))
    }

    pub fn add_assign(&mut self, other: &MacField2) {
        for (a, b) in self.u_x.iter_mut().zip(&other.u_x) {
            *a += b;
        }
        for (a, b) in self.u_y.iter_mut().zip(&other.u_y) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.u_x.iter_mut().chain(self.u_y.iter_mut()).for_each(|v| *v *= s);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellKind {
    Fluid,
    Solid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlagGrid {
    width: usize,
    height: usize,
    labels: Vec<CellKind>,
}

impl FlagGrid {
    /// All-fluid domain enclosed by a one-cell solid ring.
    pub fn closed_box(width: usize, height: usize) -> Self {
        let mut labels = vec![CellKind::Fluid; width * height];
        for j in 0..height {
            for i in 0..width {
                if i == 0 || j == 0 || i + 1 == width || j + 1 == height {
                    labels[j * width + i] = CellKind::Solid;
                }
            }
        }
        Self { width, height, labels }
    }

    pub fn from_labels(width: usize, height: usize, labels: Vec<CellKind>) -> Result<Self> {
        ensure!(labels.len() == width * height, "flag grid length mismatch");
        let grid = Self { width, height, labels };
        for j in 0..height {
            for i in 0..width {
                if (i == 0 || j == 0 || i + 1 == width || j + 1 == height) && grid.is_fluid(i, j) {
                    return Err(LssError::contract(format!(
                        "boundary cell ({i}, {j}) must be solid"
                    )));
                }
            }
        }
        Ok(grid)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[CellKind] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> CellKind {
        self.labels[j * self.width + i]
    }

    #[inline]
    pub fn is_fluid(&self, i: usize, j: usize) -> bool {
        self.labels[j * self.width + i] == CellKind::Fluid
    }

    #[inline]
    pub fn is_solid(&self, i: usize, j: usize) -> bool {
        !self.is_fluid(i, j)
    }

    /// Marks a cell solid; the boundary ring is already solid.
    pub fn set_solid(&mut self, i: usize, j: usize) {
        self.labels[j * self.width + i] = CellKind::Solid;
    }

    /// Whether x-face `i` of row `j` separates two fluid cells.
    #[inline]
    pub fn x_face_fluid(&self, i: usize, j: usize) -> bool {
        i > 0 && i < self.width && self.is_fluid(i - 1, j) && self.is_fluid(i, j)
    }

    #[inline]
    pub fn y_face_fluid(&self, i: usize, j: usize) -> bool {
        j > 0 && j < self.height && self.is_fluid(i, j - 1) && self.is_fluid(i, j)
    }

    pub fn fluid_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == CellKind::Fluid).count()
    }
}

/// Co-located network-side representation: channels-last `(u_x, u_y, rho)`
/// at every cell center.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

pub const FIELD_CHANNELS: usize = 3;

/// Co-located velocity components at cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterVelocity {
    pub ux: ScalarField,
    pub uy: ScalarField,
}

impl CenterVelocity {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { ux: ScalarField::zeros(width, height), uy: ScalarField::zeros(width, height) }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.ux.dims()
    }
}

impl FieldTensor {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { height, width, data: vec![0.0; width * height * FIELD_CHANNELS] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == width * height * FIELD_CHANNELS,
            "field tensor {}x{}x{} needs {} values, got {}",
            height,
            width,
            FIELD_CHANNELS,
            width * height * FIELD_CHANNELS,
            data.len()
        );
        Ok(Self { height, width, data })
    }

    pub fn from_parts(vel: &CenterVelocity, rho: &ScalarField) -> Result<Self> {
        ensure!(
            vel.ux.dims() == rho.dims() && vel.uy.dims() == rho.dims(),
            "velocity and density dims differ"
        );
        let (w, h) = rho.dims();
        let mut data = Vec::with_capacity(w * h * FIELD_CHANNELS);
        for k in 0..w * h {
            data.push(vel.ux.data()[k]);
            data.push(vel.uy.data()[k]);
            data.push(rho.data()[k]);
        }
        Ok(Self { height: h, width: w, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        FIELD_CHANNELS
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> ScalarField {
        let data = self.data.iter().skip(c).step_by(FIELD_CHANNELS).copied().collect();
        ScalarField { width: self.width, height: self.height, data }
    }

    pub fn velocity(&self) -> CenterVelocity {
        CenterVelocity { ux: self.channel(0), uy: self.channel(1) }
    }

    pub fn density(&self) -> ScalarField {
        self.channel(2)
    }

    /// Channels-first copy, the layout used by the convolution kernels.
    pub fn to_chw(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; n * FIELD_CHANNELS];
        for k in 0..n {
            for c in 0..FIELD_CHANNELS {
                out[c * n + k] = self.data[k * FIELD_CHANNELS + c];
            }
        }
        out
    }

    pub fn from_chw(width: usize, height: usize, chw: &[f64]) -> Result<Self> {
        let n = width * height;
        ensure!(chw.len() == n * FIELD_CHANNELS, "channels-first buffer has wrong length");
        let mut data = vec![0.0; n * FIELD_CHANNELS];
        for k in 0..n {
            for c in 0..FIELD_CHANNELS {
                data[k * FIELD_CHANNELS + c] = chw[c * n + k];
            }
        }
        Ok(Self { height, width, data })
    }
}

/// Bilinear sample of a lattice whose node `(a, b)` sits at
/// `(a + ox, b + oy)`. Positions are clamped into the node range.
pub(crate) fn sample_lattice(
    data: &[f64],
    nx: usize,
    ny: usize,
    ox: f64,
    oy: f64,
    x: f64,
    y: f64,
) -> f64 {
    let sx = (x - ox).clamp(0.0, (nx - 1) as f64);
    let sy = (y - oy).clamp(0.0, (ny - 1) as f64);
    let i0 = (sx.floor() as usize).min(nx.saturating_sub(2));
    let j0 = (sy.floor() as usize).min(ny.saturating_sub(2));
    let i1 = (i0 + 1).min(nx - 1);
    let j1 = (j0 + 1).min(ny - 1);
    let fx = sx - i0 as f64;
    let fy = sy - j0 as f64;
    let v00 = data[j0 * nx + i0];
    let v10 = data[j0 * nx + i1];
    let v01 = data[j1 * nx + i0];
    let v11 = data[j1 * nx + i1];
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
}

/// Bilinear interpolation of cell-center samples at continuous grid
/// coordinates, clamped to the domain.
pub fn sample_bilinear(field: &ScalarField, pos: (f64, f64)) -> f64 {
    sample_lattice(&field.data, field.width, field.height, 0.5, 0.5, pos.0, pos.1)
}

fn check_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(LssError::contract(format!(
            "{what}: dimension mismatch {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Net outflow per fluid cell; solid cells report 0.
pub fn divergence(u: &MacField2, flags: &FlagGrid) -> Result<ScalarField> {
    check_dims(u.dims(), flags.dims(), "divergence")?;
    let (w, h) = u.dims();
    let mut out = ScalarField::zeros(w, h);
    for j in 0..h {
        for i in 0..w {
            if flags.is_fluid(i, j) {
                let d = u.ux(i + 1, j) - u.ux(i, j) + u.uy(i, j + 1) - u.uy(i, j);
                out.set(i, j, d);
            }
        }
    }
    Ok(out)
}

/// Face-centered pressure differences; faces touching a solid cell stay zero.
pub fn gradient_to_faces(p: &ScalarField, flags: &FlagGrid) -> Result<MacField2> {
    check_dims(p.dims(), flags.dims(), "gradient_to_faces")?;
    let (w, h) = p.dims();
    let mut g = MacField2::zeros(w, h);
    for j in 0..h {
        for i in 1..w {
            if flags.x_face_fluid(i, j) {
                let k = g.x_idx(i, j);
                g.u_x[k] = p.get(i, j) - p.get(i - 1, j);
            }
        }
    }
    for j in 1..h {
        for i in 0..w {
            if flags.y_face_fluid(i, j) {
                let k = g.y_idx(i, j);
                g.u_y[k] = p.get(i, j) - p.get(i, j - 1);
            }
        }
    }
    Ok(g)
}

/// Stencil of the first derivative along an axis of length `n` at index `k`:
/// central in the interior, one-sided at the two ends.
#[inline]
pub(crate) fn diff_stencil(n: usize, k: usize) -> [(usize, f64); 2] {
    if k == 0 {
        [(1, 1.0), (0, -1.0)]
    } else if k + 1 == n {
        [(k, 1.0), (k - 1, -1.0)]
    } else {
        [(k + 1, 0.5), (k - 1, -0.5)]
    }
}

/// `u_x = d psi / dy`, `u_y = -d psi / dx` on a row-major `w x h` buffer.
pub(crate) fn curl_into(psi: &[f64], w: usize, h: usize, ux: &mut [f64], uy: &mut [f64]) {
    for j in 0..h {
        let sy = diff_stencil(h, j);
        for i in 0..w {
            let sx = diff_stencil(w, i);
            let k = j * w + i;
            ux[k] = sy.iter().map(|&(jj, c)| c * psi[jj * w + i]).sum();
            uy[k] = -sx.iter().map(|&(ii, c)| c * psi[j * w + ii]).sum::<f64>();
        }
    }
}

/// Adjoint of [`curl_into`]: accumulates into `g_psi`.
pub(crate) fn curl_adjoint(g_ux: &[f64], g_uy: &[f64], w: usize, h: usize, g_psi: &mut [f64]) {
    for j in 0..h {
        let sy = diff_stencil(h, j);
        for i in 0..w {
            let sx = diff_stencil(w, i);
            let k = j * w + i;
            for &(jj, c) in &sy {
                g_psi[jj * w + i] += c * g_ux[k];
            }
            for &(ii, c) in &sx {
                g_psi[j * w + ii] -= c * g_uy[k];
            }
        }
    }
}

/// Co-located velocity `(d psi/dy, -d psi/dx)`; central differences inside,
/// one-sided along the domain edges.
pub fn curl_stream(psi: &ScalarField) -> CenterVelocity {
    let (w, h) = psi.dims();
    let mut vel = CenterVelocity::zeros(w, h);
    curl_into(&psi.data, w, h, &mut vel.ux.data, &mut vel.uy.data);
    vel
}

/// Averages adjacent cell centers onto faces; boundary faces copy the
/// nearest center.
pub fn center_to_mac(vel: &CenterVelocity) -> Result<MacField2> {
    check_dims(vel.ux.dims(), vel.uy.dims(), "center_to_mac")?;
    let (w, h) = vel.dims();
    let mut u = MacField2::zeros(w, h);
    for j in 0..h {
        for i in 0..=w {
            let l = vel.ux.get(i.saturating_sub(1), j);
            let r = vel.ux.get(i.min(w - 1), j);
            let k = u.x_idx(i, j);
            u.u_x[k] = 0.5 * (l + r);
        }
    }
    for j in 0..=h {
        for i in 0..w {
            let b = vel.uy.get(i, j.saturating_sub(1));
            let t = vel.uy.get(i, j.min(h - 1));
            let k = u.y_idx(i, j);
            u.u_y[k] = 0.5 * (b + t);
        }
    }
    Ok(u)
}

/// Averages the two enclosing faces onto each cell center.
pub fn mac_to_center(u: &MacField2) -> CenterVelocity {
    let (w, h) = u.dims();
    let ux = ScalarField::from_fn(w, h, |i, j| 0.5 * (u.ux(i, j) + u.ux(i + 1, j)));
    let uy = ScalarField::from_fn(w, h, |i, j| 0.5 * (u.uy(i, j) + u.uy(i, j + 1)));
    CenterVelocity { ux, uy }
}

pub trait MaxAbs {
    fn max_abs(&self) -> f64;
}

fn max_abs_slice(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl MaxAbs for ScalarField {
    fn max_abs(&self) -> f64 {
        max_abs_slice(&self.data)
    }
}

impl MaxAbs for MacField2 {
    fn max_abs(&self) -> f64 {
        max_abs_slice(&self.u_x).max(max_abs_slice(&self.u_y))
    }
}

impl MaxAbs for CenterVelocity {
    fn max_abs(&self) -> f64 {
        self.ux.max_abs().max(self.uy.max_abs())
    }
}

pub fn max_abs<F: MaxAbs + ?Sized>(field: &F) -> f64 {
    field.max_abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ScalarField {
        ScalarField::from_fn(w, h, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn bilinear_constant_and_nodes() {
        let f = ScalarField::constant(5, 4, 2.0);
        for pos in [(0.0, 0.0), (2.3, 1.7), (-4.0, 9.0), (5.0, 4.0)] {
            assert_eq!(sample_bilinear(&f, pos), 2.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_field(&mut rng, 6, 5);
        for j in 0..5 {
            for i in 0..6 {
                let v = sample_bilinear(&g, (i as f64 + 0.5, j as f64 + 0.5));
                assert_eq!(v, g.get(i, j));
            }
        }
    }

    #[test]
    fn bilinear_patch_center() {
        let f = ScalarField::from_vec(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(sample_bilinear(&f, (1.0, 1.0)), 0.5);
    }

    #[test]
    fn bilinear_exact_on_bilinear_fields() {
        let f = |x: f64, y: f64| 0.3 + 1.2 * x - 0.7 * y + 0.25 * x * y;
        let field = ScalarField::from_fn(7, 6, |i, j| f(i as f64 + 0.5, j as f64 + 0.5));
        for &(x, y) in &[(0.5, 0.5), (1.3, 2.9), (3.77, 4.01), (6.5, 5.5), (2.0, 5.2)] {
            assert!((sample_bilinear(&field, (x, y)) - f(x, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_of_uniform_flow_vanishes() {
        let u = MacField2::uniform(6, 5, 3.0, -1.0);
        let d = divergence(&u, &FlagGrid::closed_box(6, 5)).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn divergence_single_face_stencil() {
        // x-face 2 of row 1 is the right face of cell 1 and the left face of cell 2.
        let mut u = MacField2::zeros(4, 4);
        let k = u.x_idx(2, 1);
        u.u_x[k] = 1.0;
        let d = divergence(&u, &FlagGrid::closed_box(4, 4)).unwrap();
        assert_eq!(d.get(1, 1), 1.0);
        assert_eq!(d.get(2, 1), -1.0);
        assert_eq!(d.sum(), 0.0);
    }

    #[test]
    fn divergence_rejects_mismatched_dims() {
        let u = MacField2::zeros(4, 4);
        assert!(matches!(divergence(&u, &FlagGrid::closed_box(5, 4)), Err(LssError::Contract(_))));
    }

    #[test]
    fn gradient_examples() {
        let flags = FlagGrid::closed_box(6, 6);
        let c = ScalarField::constant(6, 6, 4.0);
        let g = gradient_to_faces(&c, &flags).unwrap();
        assert_eq!(g.max_abs(), 0.0);

        let ramp = ScalarField::from_fn(6, 6, |i, _| i as f64);
        let g = gradient_to_faces(&ramp, &flags).unwrap();
        for j in 1..5 {
            for i in 2..5 {
                assert_eq!(g.ux(i, j), 1.0);
            }
        }
        assert!(g.u_y.iter().all(|&v| v == 0.0));

        let mut spike = ScalarField::zeros(6, 6);
        spike.set(2, 3, 1.0);
        let g = gradient_to_faces(&spike, &flags).unwrap();
        assert_eq!(g.ux(2, 3), 1.0);
        assert_eq!(g.ux(3, 3), -1.0);
        assert_eq!(g.uy(2, 3), 1.0);
        assert_eq!(g.uy(2, 4), -1.0);
        let nonzero = g.u_x.iter().chain(&g.u_y).filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 4);
    }

    #[test]
    fn div_grad_is_five_point_laplacian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (9, 7);
        let flags = FlagGrid::closed_box(w, h);
        let p = random_field(&mut rng, w, h);
        let lap = divergence(&gradient_to_faces(&p, &flags).unwrap(), &flags).unwrap();
        for j in 2..h - 2 {
            for i in 2..w - 2 {
                let direct = p.get(i + 1, j) + p.get(i - 1, j) + p.get(i, j + 1) + p.get(i, j - 1)
                    - 4.0 * p.get(i, j);
                assert!((lap.get(i, j) - direct).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn curl_examples() {
        let c = curl_stream(&ScalarField::constant(5, 6, 3.0));
        assert_eq!(c.max_abs(), 0.0);
        let vy = curl_stream(&ScalarField::from_fn(5, 6, |_, j| j as f64));
        let vx = curl_stream(&ScalarField::from_fn(5, 6, |i, _| i as f64));
        for j in 1..5 {
            for i in 1..4 {
                assert_eq!((vy.ux.get(i, j), vy.uy.get(i, j)), (1.0, 0.0));
                assert_eq!((vx.ux.get(i, j), vx.uy.get(i, j)), (0.0, -1.0));
            }
        }
    }

    #[test]
    fn curl_adjoint_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, h) = (5, 4);
        let psi: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gx: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gy: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut ux = vec![0.0; w * h];
        let mut uy = vec![0.0; w * h];
        curl_into(&psi, w, h, &mut ux, &mut uy);
        let mut gp = vec![0.0; w * h];
        curl_adjoint(&gx, &gy, w, h, &mut gp);
        let lhs: f64 = ux.iter().zip(&gx).chain(uy.iter().zip(&gy)).map(|(a, b)| a * b).sum();
        let rhs: f64 = psi.iter().zip(&gp).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn center_mac_examples() {
        let c = CenterVelocity {
            ux: ScalarField::constant(4, 3, 1.5),
            uy: ScalarField::constant(4, 3, -2.0),
        };
        let m = center_to_mac(&c).unwrap();
        assert!(m.u_x.iter().all(|&v| v == 1.5) && m.u_y.iter().all(|&v| v == -2.0));
        assert_eq!(mac_to_center(&m), c);
        let z = CenterVelocity::zeros(4, 3);
        assert_eq!(mac_to_center(&center_to_mac(&z).unwrap()), z);

        let ramp = CenterVelocity {
            ux: ScalarField::from_fn(6, 3, |i, _| i as f64),
            uy: ScalarField::zeros(6, 3),
        };
        let m = center_to_mac(&ramp).unwrap();
        for i in 1..6 {
            // face i lies between centers i-1 and i, i.e. at (i-1) + 1/2
            assert_eq!(m.ux(i, 1), (i - 1) as f64 + 0.5);
        }
    }

    #[test]
    fn max_abs_examples() {
        assert_eq!(ScalarField::zeros(3, 3).max_abs(), 0.0);
        let f = ScalarField::from_vec(2, 1, vec![-3.0, 2.0]).unwrap();
        assert_eq!(max_abs(&f), 3.0);
    }

    #[test]
    fn field_tensor_roundtrips_channels_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..4 * 3 * 3).map(|_| rng.gen()).collect();
        let t = FieldTensor::from_vec(4, 3, data).unwrap();
        let back = FieldTensor::from_chw(4, 3, &t.to_chw()).unwrap();
        assert_eq!(t, back);
        let parts = FieldTensor::from_parts(&t.velocity(), &t.density()).unwrap();
        assert_eq!(parts, t);
    }

    proptest! {
        #[test]
        fn curl_output_is_divergence_free(
            w in 4usize..12, h in 4usize..12, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let psi = random_field(&mut rng, w, h);
            let flags = FlagGrid::closed_box(w, h);
            let u = center_to_mac(&curl_stream(&psi)).unwrap();
            let d = divergence(&u, &flags).unwrap();
            prop_assert!(d.max_abs() <= 1e-6 * psi.max_abs().max(f64::MIN_POSITIVE));
        }

        #[test]
        fn center_mac_are_linear(w in 2usize..8, h in 2usize..8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = CenterVelocity { ux: random_field(&mut rng, w, h), uy: random_field(&mut rng, w, h) };
            let b = CenterVelocity { ux: random_field(&mut rng, w, h), uy: random_field(&mut rng, w, h) };
            let sum = CenterVelocity {
                ux: ScalarField::from_fn(w, h, |i, j| a.ux.get(i, j) + b.ux.get(i, j)),
                uy: ScalarField::from_fn(w, h, |i, j| a.uy.get(i, j) + b.uy.get(i, j)),
            };
            let ma = center_to_mac(&a).unwrap();
            let mb = center_to_mac(&b).unwrap();
            let ms = center_to_mac(&sum).unwrap();
            for k in 0..ms.u_x.len() {
                prop_assert!((ms.u_x[k] - ma.u_x[k] - mb.u_x[k]).abs() <= 1e-12);
            }
            for k in 0..ms.u_y.len() {
                prop_assert!((ms.u_y[k] - ma.u_y[k] - mb.u_y[k]).abs() <= 1e-12);
            }
            let mut mab = ma.clone();
            mab.add_assign(&mb);
            let ca = mac_to_center(&mab);
            let cs = mac_to_center(&ms);
            for k in 0..w * h {
                prop_assert!((ca.ux.data()[k] - cs.ux.data()[k]).abs() <= 1e-12);
                prop_assert!((ca.uy.data()[k] - cs.uy.data()[k]).abs() <= 1e-12);
            }
        }

        #[test]
        fn bilinear_stays_within_sample_range(seed in any::<u64>(), x in -3.0f64..12.0, y in -3.0f64..12.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_field(&mut rng, 6, 7);
            let (lo, hi) = f.data().iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            let v = sample_bilinear(&f, (x, y));
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}
