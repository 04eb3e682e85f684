//! Randomized instances and property checks shared by the proptest suite and
//! the acceptance runner. Each check takes a seed and builds its own
//! instance, so a failing seed reproduces the failure.

#![allow(dead_code)]

use kronflow::devices::{Coefficients, PolynomialModel, PolynomialPhase, TheveninEquivalent};
use kronflow::grid::{build_admittance, injected_power, Branch, GridModel, Node, NodeRole, PerUnitBase, Shunt};
use kronflow::kron::kron_reduce;
use kronflow::linalg::{ComplexDense, IndexSet};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Property = fn(u64) -> Result<(), String>;

pub const PROPERTIES: [(&str, Property); 5] = [
    ("Schur-complement quotient", schur_quotient),
    ("permutation equivariance", permutation_equivariance),
    ("polynomial-model λ-linearity", polynomial_linearity),
    ("Thévenin power zero at source", thevenin_zero_at_source),
    ("angle-rotation invariance of S", rotation_invariance),
];

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Symmetric compound impedance with a diagonally dominant, hence positive
/// definite, real part.
pub fn random_impedance(rng: &mut ChaCha8Rng, p: usize) -> ComplexDense {
    let mut z = ComplexDense::zeros(p, p);
    for r in 0..p {
        for col in r..p {
            let v = if r == col {
                c(rng.random_range(0.5..1.0), rng.random_range(0.5..1.5))
            } else {
                c(rng.random_range(0.0..0.4 / p as f64), rng.random_range(0.1..0.4))
            };
            z[(r, col)] = v;
            z[(col, r)] = v;
        }
    }
    z.scale(c(rng.random_range(0.01..0.2), 0.0))
}

/// Connected grid: a random tree rooted at the slack node plus a few
/// extra branches; node `n{i}` has role slack for `i = 0`, otherwise
/// resource or zero-injection at random (at least two of each).
pub fn random_grid(rng: &mut ChaCha8Rng, n: usize, p: usize) -> GridModel {
    let mut roles = vec![NodeRole::Slack];
    for i in 1..n {
        roles.push(match i {
            1 | 2 => NodeRole::Resource,
            3 | 4 => NodeRole::ZeroInjection,
            _ if rng.random_bool(0.5) => NodeRole::Resource,
            _ => NodeRole::ZeroInjection,
        });
    }
    roles[1..].shuffle(rng);
    let nodes: Vec<Node> = roles.iter().enumerate().map(|(i, r)| Node::new(format!("n{i}"), *r)).collect();
    let mut branches = Vec::new();
    for i in 1..n {
        let j = rng.random_range(0..i);
        branches.push(Branch {
            from: format!("n{j}"),
            to: format!("n{i}"),
            impedance: random_impedance(rng, p),
        });
    }
    for _ in 0..rng.random_range(0..=n / 3) {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            branches.push(Branch {
                from: format!("n{a}"),
                to: format!("n{b}"),
                impedance: random_impedance(rng, p),
            });
        }
    }
    let mut shunts = Vec::new();
    if rng.random_bool(0.5) {
        let at = rng.random_range(0..n);
        let b = rng.random_range(1e-4..1e-2);
        shunts.push(Shunt {
            node: format!("n{at}"),
            admittance: ComplexDense::diagonal(&vec![c(0.0, b); p]),
        });
    }
    GridModel::new(p, nodes, branches, shunts, PerUnitBase::default()).expect("valid random grid")
}

pub fn random_voltages(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|_| Complex64::from_polar(rng.random_range(0.9..1.1), rng.random_range(-3.2..3.2)))
        .collect()
}

fn rel_diff(a: &ComplexDense, b: &ComplexDense) -> f64 {
    a.max_abs_diff(b) / a.max_abs().max(1e-300)
}

fn vec_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).norm()))
}

fn flat(nodes: &[usize], p: usize) -> Vec<usize> {
    nodes.iter().flat_map(|&n| (0..p).map(move |k| n * p + k)).collect()
}

/// Eliminating `A` and then `B` from the result equals eliminating `A ∪ B`
/// at once.
pub fn schur_quotient(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(1..=3);
    let n = rng.random_range(5..=12);
    let grid = random_grid(&mut rng, n, p);
    let y = build_admittance(&grid).map_err(|e| e.to_string())?;
    let mut zero: Vec<usize> = grid.nodes_with_role(NodeRole::ZeroInjection).map(|(i, _)| i).collect();
    zero.shuffle(&mut rng);
    let cut = rng.random_range(1..zero.len());
    let (first, second) = zero.split_at(cut);
    let mut first = first.to_vec();
    first.sort_unstable();
    let mut both = zero.clone();
    both.sort_unstable();

    let dim = y.rows();
    let a = IndexSet::new(flat(&first, p), dim).map_err(|e| e.to_string())?;
    let step_a = kron_reduce(&y, &a).map_err(|e| e.to_string())?;
    // positions of the second batch inside the once-reduced model
    let second_flat = flat(second, p);
    let local: Vec<usize> = step_a
        .retained
        .iter()
        .enumerate()
        .filter(|(_, g)| second_flat.contains(g))
        .map(|(i, _)| i)
        .collect();
    let b = IndexSet::new(local, step_a.dim()).map_err(|e| e.to_string())?;
    let two_stage = kron_reduce(&step_a.y_reduced, &b).map_err(|e| e.to_string())?;
    let ab = IndexSet::new(flat(&both, p), dim).map_err(|e| e.to_string())?;
    let one_stage = kron_reduce(&y, &ab).map_err(|e| e.to_string())?;
    let d = rel_diff(&one_stage.y_reduced, &two_stage.y_reduced);
    if d > 1e-10 {
        return Err(format!("seed {seed}: two-stage reduction differs by {d:.3e}"));
    }
    Ok(())
}

/// Shuffling the input order of nodes and branches permutes `Y`, its Kron
/// reduction and the injected powers consistently.
pub fn permutation_equivariance(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(1..=3);
    let n = rng.random_range(4..=10);
    let grid = random_grid(&mut rng, n, p);
    let mut nodes = grid.nodes().to_vec();
    nodes.shuffle(&mut rng);
    let mut branches: Vec<Branch> = grid.branches().collect();
    branches.shuffle(&mut rng);
    for b in branches.iter_mut() {
        if rng.random_bool(0.5) {
            std::mem::swap(&mut b.from, &mut b.to);
        }
    }
    let other = GridModel::new(p, nodes, branches, grid.shunts().collect(), grid.base()).map_err(|e| e.to_string())?;

    // map[i] = flat index in `other` of flat index i in `grid`
    let map: Vec<usize> = grid
        .nodes()
        .iter()
        .flat_map(|n| {
            let at = other.position(&n.id).expect("same ids");
            (0..p).map(move |k| at * p + k)
        })
        .collect();
    let y = build_admittance(&grid).map_err(|e| e.to_string())?;
    let y2 = build_admittance(&other).map_err(|e| e.to_string())?;
    let permuted = ComplexDense::from_fn(y.rows(), y.cols(), |i, j| y2[(map[i], map[j])]);
    let d = rel_diff(&y, &permuted);
    if d > 1e-14 {
        return Err(format!("seed {seed}: admittance not equivariant ({d:.3e})"));
    }

    let v = random_voltages(&mut rng, y.rows());
    let mut v2 = vec![Complex64::new(0.0, 0.0); v.len()];
    for (i, x) in v.iter().enumerate() {
        v2[map[i]] = *x;
    }
    let s = injected_power(&y, &v).map_err(|e| e.to_string())?;
    let s2 = injected_power(&y2, &v2).map_err(|e| e.to_string())?;
    let s2_back: Vec<Complex64> = map.iter().map(|&j| s2[j]).collect();
    let d = vec_diff(&s, &s2_back);
    if d > 1e-10 * s.iter().fold(1.0f64, |m, x| m.max(x.norm())) {
        return Err(format!("seed {seed}: injected power not equivariant ({d:.3e})"));
    }

    let zero: Vec<usize> = grid.nodes_with_role(NodeRole::ZeroInjection).map(|(i, _)| i).collect();
    let elim = flat(&zero, p);
    let mut elim2: Vec<usize> = elim.iter().map(|&i| map[i]).collect();
    elim2.sort_unstable();
    let r1 = kron_reduce(&y, &IndexSet::new(elim, y.rows()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let r2 = kron_reduce(&y2, &IndexSet::new(elim2, y.rows()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let pos2: Vec<usize> = r1
        .retained
        .iter()
        .map(|g| r2.retained.iter().position(|h| h == map[g]).expect("retained in both"))
        .collect();
    let reduced = ComplexDense::from_fn(r1.dim(), r1.dim(), |i, j| r2.y_reduced[(pos2[i], pos2[j])]);
    let d = rel_diff(&r1.y_reduced, &reduced);
    if d > 1e-12 {
        return Err(format!("seed {seed}: Kron reduction not equivariant ({d:.3e})"));
    }
    Ok(())
}

fn random_coefficients(rng: &mut ChaCha8Rng) -> Coefficients {
    let w: [f64; 3] = [rng.random(), rng.random(), rng.random::<f64>() + 0.1];
    let s: f64 = w.iter().sum();
    Coefficients {
        alpha: w[0] / s,
        beta: w[1] / s,
        gamma: w[2] / s,
    }
}

/// `S(V, a + b) = S(V, a) + S(V, b)` and `S(V, k a) = k S(V, a)`.
pub fn polynomial_linearity(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(1..=4);
    let phases: Vec<PolynomialPhase> = (0..p)
        .map(|_| PolynomialPhase {
            p0: rng.random_range(-2.0..2.0),
            q0: rng.random_range(-1.0..1.0),
            v0: rng.random_range(0.9..1.1),
            real: random_coefficients(&mut rng),
            imag: random_coefficients(&mut rng),
        })
        .collect();
    let model = PolynomialModel::new("r", phases).map_err(|e| e.to_string())?;
    let v = random_voltages(&mut rng, p);
    let (a, b, k) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-5.0..5.0));
    let s = |l: f64| model.power(&v, l).expect("phase count matches");
    let sum: Vec<Complex64> = s(a).iter().zip(s(b)).map(|(x, y)| x + y).collect();
    let scaled: Vec<Complex64> = s(a).iter().map(|x| x * k).collect();
    let scale = s(1.0).iter().fold(1.0f64, |m, x| m.max(x.norm())) * (a.abs() + b.abs() + k.abs() * a.abs() + 1.0);
    let e1 = vec_diff(&s(a + b), &sum);
    let e2 = vec_diff(&s(k * a), &scaled);
    let e0 = s(0.0).iter().fold(0.0f64, |m, x| m.max(x.norm()));
    if e1 > 1e-13 * scale || e2 > 1e-13 * scale || e0 != 0.0 {
        return Err(format!("seed {seed}: additivity {e1:.3e}, homogeneity {e2:.3e}, zero {e0:.3e}"));
    }
    Ok(())
}

/// The Thévenin equivalent delivers no power when its terminals sit at the
/// source voltage.
pub fn thevenin_zero_at_source(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(1..=4);
    let source = random_voltages(&mut rng, p);
    let te = TheveninEquivalent::new("s", source.clone(), random_impedance(&mut rng, p)).map_err(|e| e.to_string())?;
    let s = te.power(&source).map_err(|e| e.to_string())?;
    let scale = te.admittance().max_abs();
    let worst = s.iter().fold(0.0f64, |m, x| m.max(x.norm()));
    if worst > 1e-13 * scale {
        return Err(format!("seed {seed}: |S_TE(V_TE)| = {worst:.3e}"));
    }
    // and it does deliver power away from the source
    let shifted: Vec<Complex64> = source.iter().map(|v| v * 0.9).collect();
    let s = te.power(&shifted).map_err(|e| e.to_string())?;
    if s.iter().all(|x| x.norm() <= 1e-6 * scale) {
        return Err(format!("seed {seed}: no power drawn at 0.9 V_TE"));
    }
    Ok(())
}

/// `S(e^{jφ} V) = S(V)`.
pub fn rotation_invariance(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(1..=3);
    let n = rng.random_range(3..=10);
    let grid = random_grid(&mut rng, n, p);
    let y = build_admittance(&grid).map_err(|e| e.to_string())?;
    let v = random_voltages(&mut rng, y.rows());
    let rot = Complex64::from_polar(1.0, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
    let vr: Vec<Complex64> = v.iter().map(|x| x * rot).collect();
    let s = injected_power(&y, &v).map_err(|e| e.to_string())?;
    let sr = injected_power(&y, &vr).map_err(|e| e.to_string())?;
    let scale = y.max_abs() * y.rows() as f64;
    let d = vec_diff(&s, &sr);
    if d > 1e-12 * scale {
        return Err(format!("seed {seed}: rotation changes S by {d:.3e}"));
    }
    Ok(())
}
