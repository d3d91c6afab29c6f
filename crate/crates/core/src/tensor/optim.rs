use super::{ParamStore, Real};

/// SGD with momentum and L2 weight decay, then zeroes the gradients:
///
/// `v ← momentum·v + grad + weight_decay·value`, `value ← value − lr·v`.
pub fn sgd_step<T: Real>(params: &mut ParamStore<T>, lr: T, momentum: T, weight_decay: T) {
    for p in params.iter_mut() {
        if p.learnable {
            let values = p.value.data_mut();
            let grads = p.grad.data();
            let velocity = p.momentum.data_mut();
            for ((w, &g), v) in values.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                *v = momentum * *v + g + weight_decay * *w;
                *w = *w - lr * *v;
            }
        }
        p.zero_grad();
    }
}
