//! Trainable parameter storage.

/// One trainable tensor: values, accumulated gradient, and Adam moments.
/// Shape bookkeeping lives with the owning layer; `Param` is flat storage.
#[derive(Debug, Clone)]
pub struct Param {
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Excluded from weight decay (biases, norm gains, embeddings).
    pub no_decay: bool,
}

impl Param {
    pub fn new(data: Vec<f64>) -> Self {
        let n = data.len();
        Param {
            data,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            no_decay: false,
        }
    }

    pub fn new_no_decay(data: Vec<f64>) -> Self {
        let mut p = Param::new(data);
        p.no_decay = true;
        p
    }

    pub fn zeros(n: usize) -> Self {
        Param::new(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grad {
            *g = 0.0;
        }
    }
}

/// Visitor over the named parameters of a model component.
///
/// Implementations must visit parameters in a fixed order and with stable
/// names; the optimizer, checkpoint writer, and gradient checker all rely on
/// that ordering.
pub trait ParamVisitor {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grads(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Two {
        a: Param,
        b: Param,
    }

    impl ParamVisitor for Two {
        fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
            f("a", &mut self.a);
            f("b", &mut self.b);
        }
    }

    #[test]
    fn zero_grads_clears_every_param() {
        let mut t = Two {
            a: Param::new(vec![1.0; 3]),
            b: Param::new(vec![2.0; 2]),
        };
        t.a.grad = vec![5.0; 3];
        t.b.grad = vec![6.0; 2];
        t.zero_grads();
        assert!(t.a.grad.iter().all(|&g| g == 0.0));
        assert!(t.b.grad.iter().all(|&g| g == 0.0));
        assert_eq!(t.param_count(), 5);
    }
}
