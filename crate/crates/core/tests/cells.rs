use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgm_core::cells::{Cell, CellKind, CellState};
use sgm_core::{ParamRegistry, Tape, Tensor};

const F: usize = 8;

fn random_tensor(shape: [usize; 4], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn make_cell(kind: CellKind, seed: u64) -> (ParamRegistry<f64>, Cell) {
    let mut reg = ParamRegistry::new();
    let cell = Cell::register(&mut reg, "c", kind, F, seed).unwrap();
    (reg, cell)
}

/// Force a sigmoid gate to a constant: zero kernel, huge bias.
fn force_gate(reg: &mut ParamRegistry<f64>, gate: &str, open: bool) {
    let kernel = reg.get(&format!("c.{gate}.kernel")).unwrap().shape().to_vec();
    reg.set(&format!("c.{gate}.kernel"), Tensor::zeros(kernel)).unwrap();
    let bias = if open { 1e3 } else { -1e3 };
    reg.set(&format!("c.{gate}.bias"), Tensor::full([F], bias)).unwrap();
}

struct StepOut {
    h: Tensor<f64>,
    c: Tensor<f64>,
    input: Option<Tensor<f64>>,
    transform: Option<Tensor<f64>>,
}

fn run_step(reg: &ParamRegistry<f64>, cell: &Cell, e: &Tensor<f64>, h: &Tensor<f64>, c: &Tensor<f64>) -> StepOut {
    let tape = Tape::new();
    let p = reg.bind(&tape);
    let state = CellState {
        h: tape.constant(h.clone()),
        c: tape.constant(c.clone()),
    };
    let tr = cell.step_traced(&tape, &p, tape.constant(e.clone()), state).unwrap();
    let v = |x| (*tape.value(x)).clone();
    StepOut {
        h: v(tr.h),
        c: v(tr.c),
        input: tr.input.map(v),
        transform: tr.transform.map(v),
    }
}

fn random_state(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    (
        random_tensor(shape, 2.0, rng),
        random_tensor(shape, 1.0, rng),
        random_tensor(shape, 1.0, rng),
    )
}

#[test]
fn counts_match_conv_shape_arithmetic() {
    // kernel weights plus biases of every 3x3 conv, written out per gate
    let conv = |cin: usize, cout: usize| cout * cin * 9 + cout;
    let f = 64;
    let expected = [
        (
            CellKind::Sgm,
            conv(2 * f, f) + conv(f, f) + conv(2 * f, f) + conv(2 * f, f),
        ),
        (
            CellKind::SgmType1,
            conv(2 * f, f) + conv(f, f) + conv(2 * f, f) + conv(f, f),
        ),
        (CellKind::Lstm, 4 * conv(2 * f, f)),
        (CellKind::Gru, 3 * conv(2 * f, f)),
        (CellKind::Vanilla, conv(2 * f, f)),
    ];
    for (kind, count) in expected {
        assert_eq!(kind.param_count(f), count, "{kind}");
        let mut reg = ParamRegistry::<f32>::new();
        let cell = Cell::register(&mut reg, "x", kind, f, 0).unwrap();
        assert_eq!(cell.param_count(), count);
        assert_eq!(reg.param_count(), count);
    }
    assert_eq!(CellKind::Sgm.param_count(64), 258_304);
    assert_eq!(CellKind::Gru.param_count(64), 221_376);
    assert_eq!(CellKind::Lstm.param_count(64), 295_168);
    assert_eq!(
        CellKind::Sgm.param_count(64) - CellKind::SgmType1.param_count(64),
        64 * 64 * 9
    );
}

#[test]
fn update_gate_extremes_select_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = [2, F, 5, 5];
    for kind in [
        CellKind::Sgm,
        CellKind::SgmType1,
        CellKind::SgmType2,
        CellKind::SgmType3,
    ] {
        for open in [true, false] {
            let (mut reg, cell) = make_cell(kind, 3);
            force_gate(&mut reg, "update_gate", open);
            let (e, h, c) = random_state(&mut rng, shape);
            let out = run_step(&reg, &cell, &e, &h, &c);
            let expected = if open {
                out.transform.unwrap()
            } else {
                out.input.unwrap()
            };
            assert_eq!(out.c, expected, "{kind} open={open}");
        }
    }
}

#[test]
fn new_state_lies_between_input_and_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shape = [2, F, 6, 6];
    for kind in CellKind::ALL.into_iter().filter(|k| k.blends_input_and_transform()) {
        for seed in 0..4 {
            let (reg, cell) = make_cell(kind, seed);
            let (e, h, c) = random_state(&mut rng, shape);
            let out = run_step(&reg, &cell, &e, &h, &c);
            let (i, t) = (out.input.unwrap(), out.transform.unwrap());
            for ((&cv, &iv), &tv) in out.c.data().iter().zip(i.data()).zip(t.data()) {
                assert!(cv >= iv.min(tv) && cv <= iv.max(tv), "{kind}: {cv} not in [{iv}, {tv}]");
            }
        }
    }
}

#[test]
fn type3_output_ignores_input_given_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = [1, F, 5, 5];
    let (e, h, c) = random_state(&mut rng, shape);
    let e2 = random_tensor(shape, 2.0, &mut rng);
    for (kind, should_change) in [(CellKind::SgmType3, false), (CellKind::Sgm, true)] {
        let (mut reg, cell) = make_cell(kind, 4);
        // cut E_n out of the input gate so the new state does not see it
        let mut k = reg.get("c.input_gate.kernel").unwrap().clone();
        let per_out = 2 * F * 9;
        for (idx, v) in k.data_mut().iter_mut().enumerate() {
            if idx % per_out >= F * 9 {
                *v = 0.0;
            }
        }
        reg.set("c.input_gate.kernel", k).unwrap();
        let a = run_step(&reg, &cell, &e, &h, &c);
        let b = run_step(&reg, &cell, &e2, &h, &c);
        assert_eq!(a.c, b.c);
        assert_eq!(a.h != b.h, should_change, "{kind}");
    }
}

#[test]
fn lstm_zero_everything_stays_zero() {
    let (reg, cell) = make_cell(CellKind::Lstm, 5);
    let z = Tensor::zeros([1, F, 4, 4]);
    let out = run_step(&reg, &cell, &z, &z, &z);
    assert!(out.h.data().iter().all(|&v| v == 0.0));
    assert!(out.c.data().iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_perfect_memory() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut reg, cell) = make_cell(CellKind::Lstm, 6);
    force_gate(&mut reg, "forget_gate", true);
    force_gate(&mut reg, "input_gate", false);
    let (e, h, c) = random_state(&mut rng, [1, F, 4, 4]);
    assert_eq!(run_step(&reg, &cell, &e, &h, &c).c, c);
}

#[test]
fn bounded_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // LSTM: |o * tanh(c)| <= 1 even when saturated; vanilla: tanh stays
    // strictly inside (-1, 1) for moderate pre-activations
    for (kind, scale) in [(CellKind::Lstm, 50.0), (CellKind::Vanilla, 1.0)] {
        for seed in 0..5 {
            let (reg, cell) = make_cell(kind, seed);
            let shape = [1, F, 6, 6];
            let e = random_tensor(shape, scale, &mut rng);
            let h = random_tensor(shape, 1.0, &mut rng);
            let c = random_tensor(shape, scale, &mut rng);
            let out = run_step(&reg, &cell, &e, &h, &c);
            for &v in out.h.data() {
                match kind {
                    CellKind::Lstm => assert!(v.abs() <= 1.0, "{v}"),
                    _ => assert!(v.abs() < 1.0, "{v}"),
                }
            }
        }
    }
}

#[test]
fn gru_closed_update_gate_keeps_hidden_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut reg, cell) = make_cell(CellKind::Gru, 8);
    force_gate(&mut reg, "update_gate", true);
    let (e, h, c) = random_state(&mut rng, [1, F, 4, 4]);
    let out = run_step(&reg, &cell, &e, &h, &c);
    assert_eq!(out.h, h);
    assert_eq!(out.c, c);
}

#[test]
fn sgm_stays_finite_for_large_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (reg, cell) = make_cell(CellKind::Sgm, 9);
    let shape = [1, F, 5, 5];
    let e = random_tensor(shape, 1e3, &mut rng);
    let h = random_tensor(shape, 1e3, &mut rng);
    let c = random_tensor(shape, 1e3, &mut rng);
    let out = run_step(&reg, &cell, &e, &h, &c);
    assert!(out.h.all_finite() && out.c.all_finite());
}

#[test]
fn steps_are_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for kind in CellKind::ALL {
        let (reg, cell) = make_cell(kind, 11);
        let (e, h, c) = random_state(&mut rng, [2, F, 5, 5]);
        let a = run_step(&reg, &cell, &e, &h, &c);
        let b = run_step(&reg, &cell, &e, &h, &c);
        assert_eq!(a.h.data(), b.h.data(), "{kind}");
        assert_eq!(a.c.data(), b.c.data(), "{kind}");
        assert_eq!(a.h.shape(), &[2, F, 5, 5]);
    }
}

#[test]
fn same_parameters_serve_any_spatial_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for kind in CellKind::ALL {
        let (reg, cell) = make_cell(kind, 13);
        let before = reg.param_count();
        for shape in [[1, F, 3, 3], [3, F, 7, 5]] {
            let (e, h, c) = random_state(&mut rng, shape);
            assert_eq!(run_step(&reg, &cell, &e, &h, &c).h.shape(), &shape);
        }
        assert_eq!(reg.param_count(), before);
    }
}

#[test]
fn rejects_mismatched_shapes() {
    let (reg, cell) = make_cell(CellKind::Sgm, 0);
    let tape = Tape::new();
    let p = reg.bind(&tape);
    let state = CellState::zeros(&tape, [1, F, 4, 4]);
    let wrong_channels = tape.constant(Tensor::zeros([1, F + 1, 4, 4]));
    assert!(cell.step(&tape, &p, wrong_channels, state).is_err());
    let wrong_size = tape.constant(Tensor::zeros([1, F, 5, 4]));
    assert!(cell.step(&tape, &p, wrong_size, state).is_err());
}
