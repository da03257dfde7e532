//! Closed-form filter for the scalar linear-Gaussian model, used as the
//! reference the particle filter is checked against.

pub struct Kalman {
    pub a: f64,
    pub b: f64,
    pub q: f64,
    pub c: f64,
    pub d: f64,
    pub r: f64,
    pub m0: f64,
    pub p0: f64,
}

pub struct KalmanOutput {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub log_lik: f64,
}

impl Kalman {
    pub fn filter(&self, ys: &[f64]) -> KalmanOutput {
        let mut means = Vec::with_capacity(ys.len());
        let mut variances = Vec::with_capacity(ys.len());
        let mut log_lik = 0.0;
        let (mut m, mut p) = (self.m0, self.p0);
        for (t, &y) in ys.iter().enumerate() {
            if t > 0 {
                m = self.a * m + self.b;
                p = self.a * self.a * p + self.q;
            }
            // Predictive density of y, then the conditioning step.
            let s = self.c * self.c * p + self.r;
            let innovation = y - (self.c * m + self.d);
            log_lik += -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + innovation * innovation / s);
            let gain = p * self.c / s;
            m += gain * innovation;
            p *= 1.0 - gain * self.c;
            means.push(m);
            variances.push(p);
        }
        KalmanOutput {
            means,
            variances,
            log_lik,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_posterior_by_hand() {
        // Prior N(0, 1), y = x + N(0, 1), y = 2: posterior N(1, 0.5),
        // marginal y ~ N(0, 2).
        let k = Kalman {
            a: 1.0,
            b: 0.0,
            q: 1.0,
            c: 1.0,
            d: 0.0,
            r: 1.0,
            m0: 0.0,
            p0: 1.0,
        };
        let out = k.filter(&[2.0]);
        assert!((out.means[0] - 1.0).abs() < 1e-15);
        assert!((out.variances[0] - 0.5).abs() < 1e-15);
        let want = -0.5 * ((4.0 * std::f64::consts::PI).ln() + 2.0);
        assert!((out.log_lik - want).abs() < 1e-14);
    }
}
