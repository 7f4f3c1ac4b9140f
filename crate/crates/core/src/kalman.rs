//! Constant-velocity Kalman filter over `(cx, cy, area, aspect)` boxes.
//!
//! State is `[cx, cy, area, aspect, vcx, vcy, varea]`; aspect (w / h) has
//! no velocity term. Noise on area and aspect is derived from the pixel
//! sigmas by first-order propagation through `area = w*h`, `aspect = w/h`.

use nalgebra::{SMatrix, SVector};

use crate::geometry::BBox;

type State = SVector<f64, 7>;
type StateCov = SMatrix<f64, 7, 7>;
type Measurement = SVector<f64, 4>;
type MeasCov = SMatrix<f64, 4, 4>;
type Observation = SMatrix<f64, 4, 7>;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NoiseConfig {
    /// Process noise on position, px per frame.
    pub position_sigma: f64,
    /// Process noise on velocity, px per frame per frame.
    pub velocity_sigma: f64,
    /// Detection noise, px.
    pub measurement_sigma: f64,
    /// Initial velocity uncertainty, px per frame.
    pub init_velocity_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { position_sigma: 1.0, velocity_sigma: 0.5, measurement_sigma: 1.0, init_velocity_sigma: 10.0 }
    }
}

fn measure(b: &BBox) -> Measurement {
    let c = b.center();
    Measurement::new(c.x, c.y, b.area(), b.w() / b.h())
}

/// Standard deviations of (cx, cy, area, aspect) for a box of size `w x h`
/// when each side is perturbed by `sigma` px.
fn box_sigmas(w: f64, h: f64, sigma: f64) -> [f64; 4] {
    let diag = libm::sqrt(w * w + h * h);
    let aspect = w / h;
    [sigma, sigma, sigma * diag, sigma * libm::sqrt(1.0 + aspect * aspect) / h]
}

fn observation() -> Observation {
    let mut h = Observation::zeros();
    for i in 0..4 {
        h[(i, i)] = 1.0;
    }
    h
}

fn transition() -> StateCov {
    let mut f = StateCov::identity();
    f[(0, 4)] = 1.0;
    f[(1, 5)] = 1.0;
    f[(2, 6)] = 1.0;
    f
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxFilter {
    state: State,
    covariance: StateCov,
    noise: NoiseConfig,
}

impl BoxFilter {
    pub fn new(b: &BBox, noise: NoiseConfig) -> Self {
        let z = measure(b);
        let mut state = State::zeros();
        state.fixed_rows_mut::<4>(0).copy_from(&z);
        let meas = box_sigmas(b.w(), b.h(), noise.measurement_sigma);
        let vel = box_sigmas(b.w(), b.h(), noise.init_velocity_sigma);
        let diag = [meas[0], meas[1], meas[2], meas[3], vel[0], vel[1], vel[2]];
        let covariance = StateCov::from_diagonal(&State::from_fn(|i, _| diag[i] * diag[i]));
        BoxFilter { state, covariance, noise }
    }

    /// `(cx, cy, area, aspect, vcx, vcy, varea)`.
    pub fn state(&self) -> [f64; 7] {
        self.state.into()
    }

    pub fn covariance(&self) -> [[f64; 7]; 7] {
        self.covariance.into()
    }

    pub fn velocity(&self) -> (f64, f64) {
        (self.state[4], self.state[5])
    }

    pub fn bbox(&self) -> BBox {
        state_to_bbox(&self.state)
    }

    /// Box the next [`predict`](Self::predict) would produce, without
    /// advancing the filter.
    pub fn peek(&self) -> BBox {
        let mut s = self.state;
        if s[2] + s[6] <= 0.0 {
            s[6] = 0.0;
        }
        state_to_bbox(&(transition() * s))
    }

    fn sizes(&self) -> (f64, f64) {
        let b = self.bbox();
        (b.w(), b.h())
    }

    pub fn predict(&mut self) -> BBox {
        if self.state[2] + self.state[6] <= 0.0 {
            self.state[6] = 0.0;
        }
        let (w, h) = self.sizes();
        let pos = box_sigmas(w, h, self.noise.position_sigma);
        let vel = box_sigmas(w, h, self.noise.velocity_sigma);
        let q = [pos[0], pos[1], pos[2], pos[3], vel[0], vel[1], vel[2]];
        let q = StateCov::from_diagonal(&State::from_fn(|i, _| q[i] * q[i]));
        let f = transition();
        self.state = f * self.state;
        self.covariance = f * self.covariance * f.transpose() + q;
        self.symmetrize();
        self.bbox()
    }

    pub fn update(&mut self, b: &BBox) {
        let z = measure(b);
        let r = box_sigmas(b.w(), b.h(), self.noise.measurement_sigma);
        let r = MeasCov::from_diagonal(&Measurement::from_fn(|i, _| r[i] * r[i]));
        let h = observation();
        let s = h * self.covariance * h.transpose() + r;
        let s_inv = match s.cholesky() {
            Some(c) => c.inverse(),
            None => s.try_inverse().unwrap_or_else(MeasCov::zeros),
        };
        let gain = self.covariance * h.transpose() * s_inv;
        self.state += gain * (z - h * self.state);
        // Joseph form keeps the covariance positive semidefinite
        let i_kh = StateCov::identity() - gain * h;
        self.covariance = i_kh * self.covariance * i_kh.transpose() + gain * r * gain.transpose();
        self.symmetrize();
        if self.state[2].is_nan() || self.state[2] <= 0.0 {
            self.state[2] = z[2];
            self.state[6] = 0.0;
        }
        if self.state[3].is_nan() || self.state[3] <= 0.0 {
            self.state[3] = z[3];
        }
    }

    fn symmetrize(&mut self) {
        self.covariance = (self.covariance + self.covariance.transpose()) * 0.5;
    }
}

fn state_to_bbox(s: &State) -> BBox {
    let area = s[2].max(f64::MIN_POSITIVE);
    let aspect = s[3].max(f64::MIN_POSITIVE);
    let w = libm::sqrt(area * aspect);
    let h = area / w;
    BBox::from_center(s[0], s[1], w, h).expect("positive area and aspect give a valid box")
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn zero_velocity_holds_still() {
        let start = b(100.0, 50.0, 60.0, 30.0);
        let mut f = BoxFilter::new(&start, NoiseConfig::default());
        let p = f.predict();
        for (a, e) in p.as_array().iter().zip(start.as_array()) {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn learns_constant_velocity() {
        let mut f = BoxFilter::new(&b(0.0, 0.0, 60.0, 30.0), NoiseConfig::default());
        for t in 1..30 {
            f.predict();
            f.update(&b(5.0 * t as f64, 0.0, 60.0, 30.0));
        }
        let (vx, vy) = f.velocity();
        assert!((vx - 5.0).abs() < 0.05, "vx = {vx}");
        assert!(vy.abs() < 0.05);
        let next = f.predict();
        assert!((next.center().x - (150.0 + 30.0)).abs() < 0.5);
    }

    #[test]
    fn covariance_stays_psd() {
        let mut f = BoxFilter::new(&b(10.0, 10.0, 55.0, 20.0), NoiseConfig::default());
        for t in 0..1000 {
            f.predict();
            if t % 7 != 0 {
                let jitter = ((t * 37) % 11) as f64 * 0.3 - 1.5;
                f.update(&b(10.0 + 2.0 * t as f64 + jitter, 10.0 - jitter, 55.0 + jitter, 20.0));
            }
            let p = SMatrix::<f64, 7, 7>::from(f.covariance());
            assert!((p - p.transpose()).amax() < 1e-9);
            let min_eig = SymmetricEigen::new(p).eigenvalues.min();
            assert!(min_eig > -1e-9 * p.amax().max(1.0), "eigenvalue {min_eig} at step {t}");
            let s = f.state();
            assert!(s[2] > 0.0 && s[3] > 0.0);
        }
    }

    #[test]
    fn shrinking_box_never_inverts() {
        let mut f = BoxFilter::new(&b(0.0, 0.0, 40.0, 40.0), NoiseConfig::default());
        for side in [30.0, 20.0, 10.0, 4.0, 2.0] {
            f.predict();
            f.update(&b(0.0, 0.0, side, side));
        }
        for _ in 0..50 {
            let p = f.predict();
            assert!(p.area() > 0.0);
        }
    }
}
