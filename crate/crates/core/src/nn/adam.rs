use super::layers::Param;

/// Adam with bias correction. Moment buffers are keyed by visit order, so
/// the same parameter traversal must be used on every step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u32,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
    cursor: usize,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new(), cursor: 0 }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// Starts an update; call [`Adam::update`] for every trainable parameter.
    pub fn begin(&mut self) {
        self.step += 1;
        self.cursor = 0;
    }

    pub fn update(&mut self, p: &mut Param) {
        if self.cursor == self.moments.len() {
            self.moments.push((vec![0.0; p.len()], vec![0.0; p.len()]));
        }
        let (m, v) = &mut self.moments[self.cursor];
        assert_eq!(m.len(), p.len(), "parameter order changed between steps");
        self.cursor += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..p.len() {
            let g = p.grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p.value[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut p = Param::new(vec![2], vec![3.0, -2.0]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            p.grad = p.value.iter().map(|v| 2.0 * v).collect();
            opt.begin();
            opt.update(&mut p);
        }
        assert!(p.value.iter().all(|v| v.abs() < 1e-2), "{:?}", p.value);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Param::new(vec![1], vec![1.0]);
        p.grad = vec![0.5];
        let mut opt = Adam::new(0.01);
        opt.begin();
        opt.update(&mut p);
        assert!((p.value[0] - 0.99).abs() < 1e-6);
    }
}
