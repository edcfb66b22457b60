//! Eigenbasis reparameterization of the entangled (z_c, φx, φy) triple.
//!
//! `[z_c, φx, φy] = anchor + E·[a, b, c]` where the columns of `E` are the
//! eigenvectors of a finite-difference Hessian of the loss.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camgrad::{grad_camera, CameraGrad};
use crate::error::{Error, Result};
use crate::geometry::{Camera, FOV_MAX, FOV_MIN};
use crate::renderer::{Image, LossKind, RenderSettings};
use crate::scene::GaussianScene;

/// Symmetric Hessian over (z_c, φx, φy).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hessian3 {
    pub h: Matrix3<f64>,
    /// `‖H − Hᵀ‖_F / ‖H‖_F` of the raw differences, before symmetrization.
    pub asymmetry: f64,
}

impl Hessian3 {
    pub fn from_raw(raw: Matrix3<f64>) -> Self {
        let h = 0.5 * (raw + raw.transpose());
        let n = raw.norm();
        let asymmetry = if n > 0.0 {
            (raw - raw.transpose()).norm() / n
        } else {
            0.0
        };
        Hessian3 { h, asymmetry }
    }
}

/// Differencing steps for the Hessian: `z` in scene units, `fov` in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HessianSteps {
    pub z: f64,
    pub fov: f64,
}

impl HessianSteps {
    pub fn for_extent(extent: f64) -> Self {
        HessianSteps {
            z: 1e-3 * extent,
            fov: 1e-4,
        }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.z, self.fov, self.fov]
    }
}

/// The (z_c, φx, φy) components of a camera gradient.
pub fn entangled_grad(g: &CameraGrad) -> [f64; 3] {
    [g.d_t.z, g.d_fov[0], g.d_fov[1]]
}

pub fn entangled_params(camera: &Camera) -> [f64; 3] {
    [camera.t.z, camera.fov_x, camera.fov_y]
}

pub fn with_entangled(camera: &Camera, p: [f64; 3]) -> Camera {
    let mut c = camera.clone();
    c.t.z = p[0];
    c.fov_x = p[1];
    c.fov_y = p[2];
    c
}

/// Central differences of a gradient function: column `k` is
/// `(g(x + ε_k e_k) − g(x − ε_k e_k)) / 2ε_k`. The six evaluations run
/// concurrently.
pub fn estimate_hessian_with<G>(x: [f64; 3], eps: [f64; 3], grad: G) -> Result<Hessian3>
where
    G: Fn([f64; 3]) -> Result<[f64; 3]> + Sync,
{
    if eps.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::domain("hessian steps must be positive"));
    }
    let probes = (0..6)
        .into_par_iter()
        .map(|i| {
            let (k, sign) = (i / 2, if i % 2 == 0 { 1.0 } else { -1.0 });
            let mut p = x;
            p[k] += sign * eps[k];
            grad(p)
        })
        .collect::<Result<Vec<[f64; 3]>>>()?;
    let mut raw = Matrix3::zeros();
    for k in 0..3 {
        let (gp, gm) = (probes[2 * k], probes[2 * k + 1]);
        for r in 0..3 {
            raw[(r, k)] = (gp[r] - gm[r]) / (2.0 * eps[k]);
        }
    }
    Ok(Hessian3::from_raw(raw))
}

pub fn estimate_hessian(
    scene: &GaussianScene,
    camera: &Camera,
    target: &Image,
    kind: LossKind,
    steps: &HessianSteps,
    settings: &RenderSettings,
) -> Result<Hessian3> {
    estimate_hessian_with(entangled_params(camera), steps.as_array(), |p| {
        let cam = with_entangled(camera, p);
        Ok(entangled_grad(&grad_camera(
            scene, &cam, target, kind, settings,
        )?))
    })
}

/// Eigendecomposition of a symmetric 3×3 matrix by cyclic Jacobi rotations.
///
/// Eigenvalues come back ordered by descending magnitude; each eigenvector
/// column has its largest-magnitude component positive.
pub fn eigen3_sym(h: &Matrix3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let mut a = 0.5 * (h + h.transpose());
    let mut v = Matrix3::<f64>::identity();
    let scale = a.norm();
    if scale > 0.0 && scale.is_finite() {
        for _ in 0..64 {
            let off = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
            if off.sqrt() <= 1e-17 * scale {
                break;
            }
            for (p, q) in [(0, 1), (0, 2), (1, 2)] {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                let mut j = Matrix3::<f64>::identity();
                j[(p, p)] = c;
                j[(q, q)] = c;
                j[(p, q)] = s;
                j[(q, p)] = -s;
                a = j.transpose() * a * j;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                v *= j;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &k| a[(k, k)].abs().total_cmp(&a[(i, i)].abs()).then(i.cmp(&k)));
    let mut lambda = Vector3::zeros();
    let mut e = Matrix3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        lambda[dst] = a[(src, src)];
        let mut col = v.column(src).into_owned();
        let lead = (0..3).fold(0, |b, r| if col[r].abs() > col[b].abs() { r } else { b });
        if col[lead] < 0.0 {
            col = -col;
        }
        e.set_column(dst, &col);
    }
    (lambda, e)
}

/// Affine frame `params = anchor + E·abc` over (z_c, φx, φy).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReparamFrame {
    pub anchor: [f64; 3],
    pub basis: Matrix3<f64>,
    pub eigenvalues: [f64; 3],
}

impl ReparamFrame {
    pub fn identity(anchor: [f64; 3]) -> Self {
        ReparamFrame {
            anchor,
            basis: Matrix3::identity(),
            eigenvalues: [0.0; 3],
        }
    }

    /// Builds the frame from a Hessian. Returns the frame and whether the
    /// identity fallback was taken (tiny spectrum or a failed residual).
    pub fn from_hessian(anchor: [f64; 3], h: &Hessian3) -> (Self, bool) {
        let (lambda, e) = eigen3_sym(&h.h);
        let norm = h.h.norm();
        let max = lambda.amax();
        let residual = (h.h * e - e * Matrix3::from_diagonal(&lambda)).norm();
        let ok = max.is_finite() && max >= 1e-12 && residual <= 1e-8 * norm;
        if !ok {
            return (ReparamFrame::identity(anchor), true);
        }
        (
            ReparamFrame {
                anchor,
                basis: e,
                eigenvalues: [lambda[0], lambda[1], lambda[2]],
            },
            false,
        )
    }

    /// `anchor + E·abc`, with fields of view clamped to `[FOV_MIN, FOV_MAX]`.
    /// The flag reports whether a clamp happened.
    pub fn abc_to_params(&self, abc: [f64; 3]) -> ([f64; 3], bool) {
        let d = self.basis * Vector3::from(abc);
        let mut p = [
            self.anchor[0] + d[0],
            self.anchor[1] + d[1],
            self.anchor[2] + d[2],
        ];
        let mut clamped = false;
        for f in &mut p[1..] {
            let c = f.clamp(FOV_MIN, FOV_MAX);
            clamped |= c != *f;
            *f = c;
        }
        (p, clamped)
    }

    pub fn params_to_abc(&self, p: [f64; 3]) -> [f64; 3] {
        let d = Vector3::new(
            p[0] - self.anchor[0],
            p[1] - self.anchor[1],
            p[2] - self.anchor[2],
        );
        let abc = self.basis.transpose() * d;
        [abc[0], abc[1], abc[2]]
    }

    /// `Eᵀ·(∂L/∂z_c, ∂L/∂φx, ∂L/∂φy)`.
    pub fn grad_abc_raw(&self, g: [f64; 3]) -> [f64; 3] {
        let r = self.basis.transpose() * Vector3::from(g);
        [r[0], r[1], r[2]]
    }

    pub fn grad_abc(&self, g: &CameraGrad) -> [f64; 3] {
        self.grad_abc_raw(entangled_grad(g))
    }
}

/// Off-diagonal Frobenius mass of `EᵀHE`, relative to `‖H‖_F`.
pub fn off_diagonal_mass(h: &Matrix3<f64>, e: &Matrix3<f64>) -> f64 {
    let d = e.transpose() * h * e;
    let off = (d - Matrix3::from_diagonal(&d.diagonal())).norm();
    let n = h.norm();
    if n > 0.0 {
        off / n
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{quat_to_rotmat, UnitQuaternion};
    use crate::renderer::render_image;
    use crate::scene::{synth_cameras, synth_scene, Layout, Rig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let q = UnitQuaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        quat_to_rotmat(&q)
    }

    fn random_sym(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let m = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        m + m.transpose()
    }

    #[test]
    fn quadratic_stub_hessian() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_sym(&mut rng);
        let h = estimate_hessian_with([0.3, -0.2, 1.1], [1e-3, 1e-4, 1e-4], |x| {
            let g = a * Vector3::from(x);
            Ok([g[0], g[1], g[2]])
        })
        .unwrap();
        assert!((h.h - a).amax() < 1e-6);
        assert!(h.asymmetry < 1e-9);
        assert!(estimate_hessian_with([0.0; 3], [0.0, 1.0, 1.0], |_| Ok([0.0; 3])).is_err());
    }

    #[test]
    fn diagonal_matrix() {
        let (l, e) = eigen3_sym(&Matrix3::from_diagonal(&Vector3::new(3.0, 2.0, 1.0)));
        assert_eq!(l, Vector3::new(3.0, 2.0, 1.0));
        assert_eq!(e, Matrix3::identity());
        let (l, e) = eigen3_sym(&Matrix3::from_diagonal(&Vector3::new(1.0, -3.0, 2.0)));
        assert_eq!(l, Vector3::new(-3.0, 2.0, 1.0));
        assert!((e.transpose() * e - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn repeated_eigenvalue() {
        let (l, e) = eigen3_sym(&Matrix3::identity());
        assert!((l - Vector3::repeat(1.0)).amax() < 1e-12);
        assert!((e.transpose() * e - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn constructive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let e0 = random_rotation(&mut rng);
            let l0 = Vector3::new(
                5.0 + rng.gen::<f64>(),
                -2.5 - rng.gen::<f64>(),
                0.1 + rng.gen::<f64>(),
            );
            let h = e0 * Matrix3::from_diagonal(&l0) * e0.transpose();
            let (l, e) = eigen3_sym(&h);
            assert!((l - l0).amax() < 1e-9);
            for k in 0..3 {
                let dot = e.column(k).dot(&e0.column(k));
                assert!((dot.abs() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn random_symmetric_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let h = random_sym(&mut rng) * 10f64.powf(rng.gen_range(-4.0..4.0));
            let (l, e) = eigen3_sym(&h);
            let res = (h * e - e * Matrix3::from_diagonal(&l)).norm();
            assert!(res < 1e-8 * h.norm());
            assert!((e.transpose() * e - Matrix3::identity()).amax() < 1e-9);
            assert!(l[0].abs() >= l[1].abs() && l[1].abs() >= l[2].abs());
            assert!(off_diagonal_mass(&h, &e) < 1e-6);
            for k in 0..3 {
                let col = e.column(k);
                let lead = (0..3).fold(0, |b, r| if col[r].abs() > col[b].abs() { r } else { b });
                assert!(col[lead] > 0.0);
            }
        }
    }

    fn random_frame(rng: &mut ChaCha8Rng) -> ReparamFrame {
        ReparamFrame {
            anchor: [3.0, 0.8, 0.7],
            basis: random_rotation(rng),
            eigenvalues: [1.0, 1.0, 1.0],
        }
    }

    #[test]
    fn frame_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_frame(&mut rng);
        assert_eq!(f.abc_to_params([0.0; 3]), (f.anchor, false));
        let id = ReparamFrame::identity([3.0, 0.8, 0.7]);
        let (p, _) = id.abc_to_params([0.1, 0.01, -0.02]);
        assert_eq!(p, [3.1, 0.81, 0.7 - 0.02]);
        for _ in 0..100 {
            let abc = [
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
            ];
            let back = f.params_to_abc(f.abc_to_params(abc).0);
            for k in 0..3 {
                assert!((back[k] - abc[k]).abs() < 1e-12);
            }
            let g = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let ga = f.grad_abc_raw(g);
            assert!((Vector3::from(ga).norm() - Vector3::from(g).norm()).abs() < 1e-12);
            assert_eq!(id.grad_abc_raw(g), g);
        }
    }

    #[test]
    fn frame_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_frame(&mut rng);
        let x = Vector3::new(0.02, -0.03, 0.01);
        let y = Vector3::new(-0.01, 0.05, 0.04);
        let (al, be) = (0.7, -1.3);
        let m = |v: Vector3<f64>| Vector3::from(f.abc_to_params([v[0], v[1], v[2]]).0);
        let a = Vector3::from(f.anchor);
        let lhs = m(al * x + be * y);
        let rhs = a + al * (m(x) - a) + be * (m(y) - a);
        assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn fov_clamp_flag() {
        let f = ReparamFrame::identity([3.0, 3.1, 0.7]);
        let (p, flag) = f.abc_to_params([0.0, 0.2, 0.0]);
        assert!(flag);
        assert_eq!(p[1], FOV_MAX);
        let (p, flag) = f.abc_to_params([0.0, 0.0, -1.0]);
        assert!(flag);
        assert_eq!(p[2], FOV_MIN);
    }

    #[test]
    fn quadratic_stub_abc_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e0 = random_rotation(&mut rng);
        let l0 = Vector3::new(4.0, 0.5, 0.01);
        let h = e0 * Matrix3::from_diagonal(&l0) * e0.transpose();
        let (frame, degenerate) = ReparamFrame::from_hessian([0.0; 3], &Hessian3::from_raw(h));
        assert!(!degenerate);
        let theta = Vector3::new(0.3, -0.2, 0.7);
        let p = frame.basis * theta;
        let g = h * p;
        let ga = frame.grad_abc_raw([g[0], g[1], g[2]]);
        for k in 0..3 {
            assert!((ga[k] - frame.eigenvalues[k] * theta[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn degenerate_falls_back_to_identity() {
        let (f, deg) =
            ReparamFrame::from_hessian([1.0, 2.0, 3.0], &Hessian3::from_raw(Matrix3::zeros()));
        assert!(deg);
        assert_eq!(f.basis, Matrix3::identity());
        let (f, deg) = ReparamFrame::from_hessian(
            [0.0; 3],
            &Hessian3::from_raw(Matrix3::from_element(f64::NAN)),
        );
        assert!(deg);
        assert_eq!(f.basis, Matrix3::identity());
    }

    #[test]
    fn hessian_at_ground_truth() {
        let s = RenderSettings::default();
        for seed in 0..3 {
            let scene = synth_scene(seed, 300, Layout::TexturedWall).unwrap();
            let cam = synth_cameras(seed, 3, &scene, Rig::Arc, 64, 64)
                .unwrap()
                .remove(0);
            let target = render_image(&scene, &cam, &s);
            let h = estimate_hessian(
                &scene,
                &cam,
                &target,
                LossKind::L2,
                &HessianSteps::for_extent(scene.extent),
                &s,
            )
            .unwrap();
            assert!(h.asymmetry < 0.1, "asymmetry {}", h.asymmetry);
            let (l, _) = eigen3_sym(&h.h);
            assert!(l.iter().all(|v| *v >= -1e-6 * l.amax()), "{l:?}");
        }
    }
}
