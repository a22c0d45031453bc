//! Generic building-block transformations.
//!
//! Host kernels walk slices; device kernels are written per element, the
//! way a simulated thread would see them. Both use the same operation order
//! so their results agree bitwise.

use std::sync::Arc;

use crate::graph::{ShapeRule, TransformationSpec};
use crate::memory::{DeviceKind, KernelArgs, KernelFn, Shape};
use crate::scalar::Scalar;

/// Wraps a per-element body into a kernel that visits the dispatched range.
pub fn per_element<T, F>(body: F) -> KernelFn<T>
where
    T: Scalar,
    F: Fn(usize, &KernelArgs<'_, T>, &mut [&mut [T]]) + Send + Sync + 'static,
{
    Arc::new(move |args: &KernelArgs<'_, T>, outs: &mut [&mut [T]]| {
        for i in args.range.clone() {
            body(i, args, outs);
        }
    })
}

/// Host-only source holding fixed data.
///
/// # Panics
/// If `data` is empty.
pub fn constant<T: Scalar>(name: &str, data: Vec<T>) -> TransformationSpec<T> {
    let shape = Shape::vector(data.len());
    constant_shaped(name, shape, data)
}

/// # Panics
/// If `data.len()` differs from the element count of `shape`.
pub fn constant_shaped<T: Scalar>(name: &str, shape: Shape, data: Vec<T>) -> TransformationSpec<T> {
    assert_eq!(shape.len(), data.len(), "constant `{name}` data does not fill {shape}");
    let host: KernelFn<T> = Arc::new(move |args: &KernelArgs<'_, T>, outs: &mut [&mut [T]]| {
        let r = args.range.clone();
        outs[0][r.clone()].copy_from_slice(&data[r]);
    });
    TransformationSpec::new(name)
        .output("data", ShapeRule::Constant(shape))
        .kernel(DeviceKind::Host, host)
}

#[inline]
fn linspace_at<T: Scalar>(min: T, max: T, count: usize, i: usize) -> T {
    if count == 1 {
        return min;
    }
    min + (max - min) * T::of(i as f64) / T::of((count - 1) as f64)
}

/// Evenly spaced points from `min` to `max` inclusive.
pub fn linspace<T: Scalar>(name: &str, min: f64, max: f64, count: usize) -> TransformationSpec<T> {
    let (lo, hi) = (T::of(min), T::of(max));
    let host: KernelFn<T> = Arc::new(move |args: &KernelArgs<'_, T>, outs: &mut [&mut [T]]| {
        let r = args.range.clone();
        for (i, out) in r.clone().zip(outs[0][r].iter_mut()) {
            *out = linspace_at(lo, hi, count, i);
        }
    });
    let device = per_element(move |i, _, outs: &mut [&mut [T]]| {
        outs[0][i] = linspace_at(lo, hi, count, i);
    });
    TransformationSpec::new(name)
        .output("points", ShapeRule::Constant(Shape::vector(count)))
        .kernel(DeviceKind::Host, host)
        .kernel(DeviceKind::Sim, device)
}

pub fn identity<T: Scalar>(name: &str) -> TransformationSpec<T> {
    let host: KernelFn<T> = Arc::new(|args: &KernelArgs<'_, T>, outs: &mut [&mut [T]]| {
        let r = args.range.clone();
        outs[0][r.clone()].copy_from_slice(&args.inputs[0][r]);
    });
    let device = per_element(|i, args, outs: &mut [&mut [T]]| outs[0][i] = args.inputs[0][i]);
    TransformationSpec::new(name)
        .input("x", None)
        .output("y", ShapeRule::SameAsInput(0))
        .kernel(DeviceKind::Host, host)
        .kernel(DeviceKind::Sim, device)
}

/// `y = k * x` with `k` a variable.
pub fn scale<T: Scalar>(name: &str) -> TransformationSpec<T> {
    let host: KernelFn<T> = Arc::new(|args: &KernelArgs<'_, T>, outs: &mut [&mut [T]]| {
        let r = args.range.clone();
        let k = args.vars[0];
        for (y, &x) in outs[0][r.clone()].iter_mut().zip(&args.inputs[0][r]) {
            *y = k * x;
        }
    });
    let device = per_element(|i, args, outs: &mut [&mut [T]]| {
        outs[0][i] = args.vars[0] * args.inputs[0][i];
    });
    TransformationSpec::new(name)
        .input("x", None)
        .output("y", ShapeRule::SameAsInput(0))
        .variable("k")
        .kernel(DeviceKind::Host, host)
        .kernel(DeviceKind::Sim, device)
}

fn fold_inputs<T: Scalar>(name: &str, arity: usize, op: fn(T, T) -> T) -> TransformationSpec<T> {
    assert!(arity >= 1, "`{name}` needs at least one operand");
    let host: KernelFn<T> = Arc::new(move |args: &KernelArgs<'_, T>, outs: &mut [&mut [T]]| {
        let r = args.range.clone();
        let out = &mut outs[0][r.clone()];
        out.copy_from_slice(&args.inputs[0][r.clone()]);
        for input in &args.inputs[1..] {
            for (y, &x) in out.iter_mut().zip(&input[r.clone()]) {
                *y = op(*y, x);
            }
        }
    });
    let device = per_element(move |i, args, outs: &mut [&mut [T]]| {
        let mut acc = args.inputs[0][i];
        for input in &args.inputs[1..] {
            acc = op(acc, input[i]);
        }
        outs[0][i] = acc;
    });
    let mut spec = TransformationSpec::new(name);
    for k in 0..arity {
        spec = spec.input(format!("x{k}"), None);
    }
    spec.output("y", ShapeRule::elementwise())
        .kernel(DeviceKind::Host, host)
        .kernel(DeviceKind::Sim, device)
}

/// Elementwise sum of `arity` operands, accumulated left to right.
pub fn add<T: Scalar>(name: &str, arity: usize) -> TransformationSpec<T> {
    fold_inputs(name, arity, |a, b| a + b)
}

/// Elementwise product of `arity` operands, accumulated left to right.
pub fn product<T: Scalar>(name: &str, arity: usize) -> TransformationSpec<T> {
    fold_inputs(name, arity, |a, b| a * b)
}

/// `y = w0*x0 + w1*x1 + ...` with one weight variable per operand.
pub fn weighted_sum<T: Scalar>(name: &str, arity: usize) -> TransformationSpec<T> {
    assert!(arity >= 1, "`{name}` needs at least one operand");
    let host: KernelFn<T> = Arc::new(|args: &KernelArgs<'_, T>, outs: &mut [&mut [T]]| {
        let r = args.range.clone();
        let out = &mut outs[0][r.clone()];
        let w0 = args.vars[0];
        for (y, &x) in out.iter_mut().zip(&args.inputs[0][r.clone()]) {
            *y = w0 * x;
        }
        for (input, &w) in args.inputs.iter().zip(args.vars).skip(1) {
            for (y, &x) in out.iter_mut().zip(&input[r.clone()]) {
                *y = *y + w * x;
            }
        }
    });
    let device = per_element(|i, args, outs: &mut [&mut [T]]| {
        let mut acc = args.vars[0] * args.inputs[0][i];
        for (input, &w) in args.inputs.iter().zip(args.vars).skip(1) {
            acc = acc + w * input[i];
        }
        outs[0][i] = acc;
    });
    let mut spec = TransformationSpec::new(name);
    for k in 0..arity {
        spec = spec.input(format!("x{k}"), None).variable(format!("w{k}"));
    }
    spec.output("y", ShapeRule::elementwise())
        .kernel(DeviceKind::Host, host)
        .kernel(DeviceKind::Sim, device)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run<T: Scalar>(
        spec: &TransformationSpec<T>,
        kind: DeviceKind,
        inputs: &[&[T]],
        vars: &[T],
        len: usize,
    ) -> Vec<T> {
        let mut out = vec![T::zero(); len];
        {
            let mut outs: Vec<&mut [T]> = vec![out.as_mut_slice()];
            let args = KernelArgs {
                inputs,
                vars,
                range: 0..len,
            };
            spec.kernels[&kind](&args, &mut outs);
        }
        out
    }

    #[test]
    fn add_two_vectors() {
        let spec = add::<f64>("add", 2);
        assert_eq!(
            run(&spec, DeviceKind::Host, &[&[1.0, 2.0], &[3.0, 4.0]], &[], 2),
            vec![4.0, 6.0]
        );
        assert_eq!(
            run(&spec, DeviceKind::Sim, &[&[1.0, 2.0], &[3.0, 4.0]], &[], 2),
            vec![4.0, 6.0]
        );
    }

    #[test]
    fn unit_weighted_sum_is_identity() {
        let spec = weighted_sum::<f64>("ws", 1);
        let x = [0.1, -2.5, 1e300];
        assert_eq!(run(&spec, DeviceKind::Host, &[&x], &[1.0], 3), x.to_vec());
    }

    #[test]
    fn product_and_scale() {
        let p = product::<f32>("p", 3);
        assert_eq!(run(&p, DeviceKind::Host, &[&[2.0], &[3.0], &[4.0]], &[], 1), vec![24.0]);
        let s = scale::<f64>("s");
        assert_eq!(run(&s, DeviceKind::Sim, &[&[1.5, -1.0]], &[2.0], 2), vec![3.0, -2.0]);
    }

    #[test]
    fn linspace_endpoints() {
        let spec = linspace::<f64>("e", 1.0, 10.0, 10);
        let pts = run(&spec, DeviceKind::Host, &[], &[], 10);
        assert_eq!(pts.first(), Some(&1.0));
        assert_eq!(pts.last(), Some(&10.0));
        assert_eq!(pts, run(&spec, DeviceKind::Sim, &[], &[], 10));
        let single = linspace::<f64>("one", 3.0, 9.0, 1);
        assert_eq!(run(&single, DeviceKind::Host, &[], &[], 1), vec![3.0]);
    }

    #[test]
    fn host_and_device_agree_bitwise_on_pseudorandom_data() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 257;
        let xs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..n).map(|_| rng.gen_range(-1e3..1e3)).collect())
            .collect();
        let views: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let w = [0.3, -1.7, 2.9];
        for spec in [
            add("a", 3),
            product("p", 3),
            weighted_sum("w", 3),
            identity("i"),
            scale("s"),
        ] {
            let arity = spec.inputs.len();
            let host = run(&spec, DeviceKind::Host, &views[..arity], &w, n);
            let dev = run(&spec, DeviceKind::Sim, &views[..arity], &w, n);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&host), bits(&dev), "{}", spec.name);
        }
    }
}
