use std::collections::{BTreeMap, BTreeSet};

use ctxsteer::calibration::{BucketScheme, PositionPrior};
use ctxsteer::extraction::{ContextPreferenceVector, CpvKind, LayerFit};
use ctxsteer::linalg::{Matrix, Vector};
use ctxsteer::model::{
    forward, generate_greedy, HookSite, MlpHook, ModelConfig, ResidualInjector, Session, StepInput, Transformer,
};
use ctxsteer::steering::{steer_generate, Gate, InjectionHandle, InjectionSpec, SteeringError};

const LAYERS: usize = 6;
const D: usize = 16;

fn model() -> Transformer<f32> {
    Transformer::new(ModelConfig {
        n_layers: LAYERS,
        d_model: D,
        n_heads: 2,
        d_mlp: 32,
        vocab_size: 40,
        max_seq: 96,
        seed: 21,
    })
    .unwrap()
}

fn cpv(kind: CpvKind, salt: f64) -> ContextPreferenceVector {
    let per_layer = (0..LAYERS)
        .map(|l| {
            let w = (0..D).map(|i| ((i as f64 + salt) * (l as f64 + 1.3)).cos()).collect();
            (
                l,
                LayerFit {
                    weights: Vector::new(w).unwrap(),
                    intercept: 0.0,
                    r_squared: 1.0,
                    cv_r2: None,
                },
            )
        })
        .collect::<BTreeMap<_, _>>();
    ContextPreferenceVector {
        kind,
        per_layer,
        lambda: 1.0,
        epsilon: 0.1,
        n_used: 10,
        d_model: D,
        source_corpus_hash: String::new(),
    }
}

fn prefix(rows: usize, salt: f32) -> Matrix<f32> {
    let data = (0..rows * D).map(|i| ((i as f32 + salt) * 0.61).sin()).collect();
    Matrix::from_vec(rows, D, data).unwrap()
}

fn spec(layers: &[usize], alpha: f64, beta: f64, gate: Gate) -> InjectionSpec {
    InjectionSpec {
        layers: layers.iter().copied().collect(),
        alpha,
        beta,
        gate,
    }
}

#[test]
fn zero_strength_is_bit_identical_to_vanilla() {
    let m = model();
    let prior = PositionPrior::from_rates(BucketScheme::default(), vec![0.5; 13], 2.0).unwrap();
    for i in 0..20u64 {
        let p = prefix(1 + (i as usize % 4), i as f32);
        let prompt: Vec<u32> = (0..3).map(|k| ((i * 7 + k * 3) % 40) as u32).collect();
        let vanilla = generate_greedy(&m, &p, &prompt, 10, None).unwrap();
        for gate in [Gate::ConstantOne, Gate::TemperedPrior(prior.clone())] {
            let mut h = InjectionHandle::new(
                spec(&[1, 2, 3], 0.0, 0.0, gate),
                Some(cpv(CpvKind::Vfv, 0.0)),
                Some(cpv(CpvKind::Mrv, 1.0)),
                &m,
            )
            .unwrap();
            let steered = steer_generate(&m, &mut h, &p, &prompt, 10).unwrap();
            assert_eq!(steered.tokens, vanilla.tokens);
            assert_eq!(steered.step_logits, vanilla.step_logits);
        }
    }
}

#[test]
fn one_application_per_forward_segment() {
    let m = model();
    for max_new in [0, 1, 5, 17] {
        let mut h = InjectionHandle::new(
            spec(&[2], 1.5, 0.0, Gate::ConstantOne),
            Some(cpv(CpvKind::Vfv, 0.0)),
            None,
            &m,
        )
        .unwrap();
        let g = steer_generate(&m, &mut h, &prefix(2, 0.0), &[1, 2], max_new).unwrap();
        assert_eq!(h.application_count(), max_new + 1);
        assert_eq!(g.injection_applications, max_new + 1);
        assert_eq!(g.forward_segments, max_new + 1);
        assert!(g.prefill_injected);
    }
}

/// Hook that adds a fixed residual at chosen layers, optionally only at one
/// position.
struct AddAt {
    residual: Vec<f32>,
    layers: BTreeSet<usize>,
    only_position: Option<usize>,
}

impl MlpHook<f32> for AddAt {
    fn on_mlp_output(&mut self, layer: usize, position: usize, output: &mut [f32]) {
        if self.layers.contains(&layer) && self.only_position.is_none_or(|p| p == position) {
            for (o, r) in output.iter_mut().zip(&self.residual) {
                *o += r;
            }
        }
    }
}

#[test]
fn prefill_injects_only_the_last_prompt_position() {
    let m = model();
    let vfv = cpv(CpvKind::Vfv, 0.0);
    let layers = [2usize, 3];
    let p = prefix(3, 4.0);
    let prompt = [4u32, 9, 11];
    let mut h = InjectionHandle::new(spec(&layers, 2.0, 0.0, Gate::ConstantOne), Some(vfv.clone()), None, &m).unwrap();
    let steered = steer_generate(&m, &mut h, &p, &prompt, 1).unwrap();

    // reference: vanilla session with the residual added at the final prompt position only
    let last = p.rows() + prompt.len() - 1;
    let run = |only_position: Option<usize>| {
        let mut s = Session::new(&m);
        let mut hooks: Vec<AddAt> = layers
            .iter()
            .map(|&l| AddAt {
                residual: vfv.vector(l).unwrap().iter().map(|x| (2.0 * x) as f32).collect(),
                layers: [l].into(),
                only_position,
            })
            .collect();
        struct Both<'a>(&'a mut [AddAt]);
        impl MlpHook<f32> for Both<'_> {
            fn on_mlp_output(&mut self, layer: usize, position: usize, output: &mut [f32]) {
                for h in self.0.iter_mut() {
                    h.on_mlp_output(layer, position, output);
                }
            }
        }
        for pos in 0..=last {
            let input = if pos < p.rows() {
                StepInput::Embedding(p.row(pos))
            } else {
                StepInput::Token(prompt[pos - p.rows()])
            };
            s.step(input, &mut Both(&mut hooks)).unwrap();
        }
        s.logits()
    };
    assert_eq!(run(Some(last)), steered.step_logits[0]);
    assert_ne!(run(None), steered.step_logits[0]);
}

/// Injector that records the un-injected MLP outputs it sees and counts calls.
struct Recorder {
    calls: usize,
    segments: usize,
    first_segment: BTreeMap<usize, Vec<f32>>,
}

impl ResidualInjector<f32> for Recorder {
    fn gate(&self, _t: usize) -> f32 {
        1.0
    }
    fn begin_segment(&mut self) {
        self.segments += 1;
    }
    fn apply(&mut self, layer: usize, _gamma: f32, output: &mut [f32]) {
        self.calls += 1;
        if self.segments == 1 {
            self.first_segment.insert(layer, output.to_vec());
        }
        output.iter_mut().for_each(|o| *o += 0.25);
    }
}

#[test]
fn earlier_positions_and_layers_are_untouched() {
    let m = model();
    let p = prefix(2, 1.0);
    let prompt = [3u32, 5, 8];
    let mut rec = Recorder {
        calls: 0,
        segments: 0,
        first_segment: BTreeMap::new(),
    };
    ctxsteer::model::generate_greedy_timed(&m, &p, &prompt, 4, Some(&mut rec), None).unwrap();
    assert_eq!(rec.segments, 5);
    assert_eq!(rec.calls, 5 * LAYERS);
    // layer 0 at the last prompt position sees only un-injected history
    let last = p.rows() + prompt.len() - 1;
    let vanilla = forward(&m, &p, &prompt, &[last].into(), &[HookSite::mlp_output(0)].into()).unwrap();
    assert_eq!(
        rec.first_segment[&0].as_slice(),
        vanilla.mlp_output(0, last).unwrap().as_slice()
    );
}

#[test]
fn residual_only_reaches_later_layers() {
    let m = model();
    let p = prefix(2, 3.0);
    let prompt = [1u32, 2];
    let last = p.rows() + prompt.len() - 1;
    let sites = HookSite::all(LAYERS);
    let vanilla = forward(&m, &p, &prompt, &[last].into(), &sites).unwrap();
    let mut s = Session::new(&m);
    let mut hook = AddAt {
        residual: vec![0.5; D],
        layers: [3].into(),
        only_position: Some(last),
    };
    struct Tap<'a> {
        inner: &'a mut AddAt,
        seen: BTreeMap<usize, Vec<f32>>,
        last: usize,
    }
    impl MlpHook<f32> for Tap<'_> {
        fn on_mlp_output(&mut self, layer: usize, position: usize, output: &mut [f32]) {
            if position == self.last {
                self.seen.insert(layer, output.to_vec());
            }
            self.inner.on_mlp_output(layer, position, output);
        }
    }
    let mut tap = Tap {
        inner: &mut hook,
        seen: BTreeMap::new(),
        last,
    };
    for pos in 0..=last {
        let input = if pos < p.rows() {
            StepInput::Embedding(p.row(pos))
        } else {
            StepInput::Token(prompt[pos - p.rows()])
        };
        s.step(input, &mut tap).unwrap();
    }
    for layer in 0..=3 {
        assert_eq!(
            tap.seen[&layer].as_slice(),
            vanilla.mlp_output(layer, last).unwrap().as_slice()
        );
    }
    for layer in 4..LAYERS {
        assert_ne!(
            tap.seen[&layer].as_slice(),
            vanilla.mlp_output(layer, last).unwrap().as_slice()
        );
    }
}

#[test]
fn gates_follow_the_prior_schedule() {
    let m = model();
    let scheme = BucketScheme::new(vec![0, 3, 6]).unwrap();
    let prior = PositionPrior::from_rates(scheme, vec![0.0, 0.1, 0.4], 2.0).unwrap();
    let mut h = InjectionHandle::new(
        spec(&[1], 1.0, 0.0, Gate::TemperedPrior(prior.clone())),
        Some(cpv(CpvKind::Vfv, 2.0)),
        None,
        &m,
    )
    .unwrap();
    let g = steer_generate(&m, &mut h, &prefix(1, 0.0), &[2], 9).unwrap();
    let expected: Vec<f64> = (0..9).map(|t| prior.gate(t) as f32 as f64).collect();
    assert_eq!(g.per_step_gates, expected);
    assert_eq!(
        g.per_step_injected,
        expected.iter().map(|&x| x != 0.0).collect::<Vec<_>>()
    );
    // the zero-gate steps leave the first tokens identical to vanilla
    let vanilla = generate_greedy(&m, &prefix(1, 0.0), &[2], 9, None).unwrap();
    assert_eq!(g.step_logits[0], vanilla.step_logits[0]);
    assert_eq!(g.step_logits[2], vanilla.step_logits[2]);
}

#[test]
fn gamma_scales_the_residual_linearly() {
    // with a constant gate c, the injected MLP output equals h + c·r
    let m = model();
    let vfv = cpv(CpvKind::Vfv, 0.5);
    for c in [0.25, 0.5, 1.0] {
        let prior = PositionPrior::from_rates(BucketScheme::new(vec![0]).unwrap(), vec![1.0], 1.0).unwrap();
        let scaled = InjectionSpec {
            alpha: c,
            ..spec(&[2], 0.0, 0.0, Gate::TemperedPrior(prior))
        };
        let mut a = InjectionHandle::new(scaled, Some(vfv.clone()), None, &m).unwrap();
        let ra: Vec<f32> = a.residual(2).unwrap().to_vec();
        let mut b = InjectionHandle::new(spec(&[2], 1.0, 0.0, Gate::ConstantOne), Some(vfv.clone()), None, &m).unwrap();
        let rb: Vec<f32> = b.residual(2).unwrap().to_vec();
        let mut out_a = vec![1.0f32; D];
        let mut out_b = vec![1.0f32; D];
        a.apply(2, 1.0, &mut out_a);
        b.apply(2, c as f32, &mut out_b);
        for i in 0..D {
            assert!((ra[i] - c as f32 * rb[i]).abs() < 1e-6);
            assert!((out_a[i] - out_b[i]).abs() < 1e-5);
        }
    }
}

#[test]
fn handle_guards() {
    let m = model();
    assert!(matches!(
        InjectionHandle::new(spec(&[1], 1.0, 0.0, Gate::ConstantOne), None, None, &m),
        Err(SteeringError::MissingVector { kind: CpvKind::Vfv })
    ));
    assert!(matches!(
        InjectionHandle::new(
            spec(&[LAYERS], 1.0, 0.0, Gate::ConstantOne),
            Some(cpv(CpvKind::Vfv, 0.0)),
            None,
            &m
        ),
        Err(SteeringError::LayerOutOfRange { .. })
    ));
    assert!(matches!(
        InjectionHandle::new(spec(&[1], f64::NAN, 0.0, Gate::ConstantOne), None, None, &m),
        Err(SteeringError::NonFiniteStrength)
    ));
    let mut narrow = cpv(CpvKind::Mrv, 0.0);
    narrow.d_model = 8;
    assert!(matches!(
        InjectionHandle::new(spec(&[1], 0.0, 1.0, Gate::ConstantOne), None, Some(narrow), &m),
        Err(SteeringError::DimensionMismatch { .. })
    ));
}
