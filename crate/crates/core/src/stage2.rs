//! Masked token prediction against a frozen teacher: the student sees only
//! visible tokens and predicts the teacher's pooled instance feature and
//! its decoder outputs at the masked positions.

use crate::error::{Error, Result};
use crate::nn::{decode, embed_tokens, encode, pos_embed, predictor, Bound, MaskPlan, ModelParams, TokenInputs};
use crate::tensor::{Tape, Tensor, Var};

/// Teacher outputs for one scene; plain values, never on a student tape.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutput {
    /// Mean of the encoder outputs, `[1, L]`.
    pub f_ins: Tensor,
    /// Decoder outputs at the plan's masked positions, `[N_m, L]`.
    pub token_targets: Tensor,
}

pub struct StudentOutput {
    pub f_ins: Var,
    /// `None` when nothing is masked.
    pub token_preds: Option<Var>,
}

pub struct Stage2Losses {
    pub ins: Var,
    pub token: Var,
    pub total: Var,
}

fn l2_normalize_rows(t: &mut Tensor) {
    let c = t.cols();
    for row in t.data_mut().chunks_mut(c.max(1)) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Runs the frozen teacher over all tokens. The decoder sees every position
/// as visible; the plan only selects which outputs become targets.
pub fn teacher_forward(
    teacher: &ModelParams,
    inputs: &TokenInputs,
    plan: &MaskPlan,
    normalize_targets: bool,
) -> Result<TeacherOutput> {
    if !teacher.is_fully_frozen() {
        return Err(Error::InvalidInput("teacher parameters must all be frozen".into()));
    }
    if plan.n_tokens() != inputs.len() {
        return Err(Error::DimensionMismatch(format!(
            "mask plan covers {} tokens, scene has {}",
            plan.n_tokens(),
            inputs.len()
        )));
    }
    let tape = Tape::new();
    let p = teacher.bind(&tape);
    let pos = pos_embed(&p, &inputs.centroids)?;
    let enc = encode(&p, tape.add(embed_tokens(&p, inputs)?, pos)?)?;
    let f_ins = tape.value(tape.mean_pool(enc, 0)?).clone();
    let all: Vec<usize> = (0..inputs.len()).collect();
    let dec = decode(&p, enc, &all, &[], pos)?;
    let mut token_targets = tape.value(tape.gather_rows(dec, &plan.masked)?).clone();
    if normalize_targets {
        l2_normalize_rows(&mut token_targets);
    }
    Ok(TeacherOutput { f_ins, token_targets })
}

/// Student pass over the visible tokens only; the decoder fills masked
/// positions with the shared mask query.
pub fn student_forward(p: &Bound, inputs: &TokenInputs, plan: &MaskPlan) -> Result<StudentOutput> {
    if plan.n_tokens() != inputs.len() {
        return Err(Error::DimensionMismatch(format!(
            "mask plan covers {} tokens, scene has {}",
            plan.n_tokens(),
            inputs.len()
        )));
    }
    if plan.visible.is_empty() {
        return Err(Error::DegeneratePlan {
            masked: plan.masked.len(),
            total: plan.n_tokens(),
        });
    }
    let tape = p.tape;
    let vis = inputs.subset(&plan.visible);
    let enc = encode(p, tape.add(embed_tokens(p, &vis)?, pos_embed(p, &vis.centroids)?)?)?;
    let f_ins = tape.mean_pool(enc, 0)?;
    let token_preds = if plan.masked.is_empty() {
        None
    } else {
        let pos = pos_embed(p, &inputs.centroids)?;
        let dec = decode(p, enc, &plan.visible, &plan.masked, pos)?;
        Some(tape.gather_rows(dec, &plan.masked)?)
    };
    Ok(StudentOutput { f_ins, token_preds })
}

/// `L_ins = MSE(MLP(f_ins_student), f_ins_teacher)`,
/// `L_token = mean over masked tokens of the per-token MSE` (0 if none),
/// `L_final = L_ins + L_token`.
pub fn stage2_loss(p: &Bound, student: &StudentOutput, teacher: &TeacherOutput) -> Result<Stage2Losses> {
    let tape = p.tape;
    let ins = tape.mse(predictor(p, student.f_ins)?, tape.constant(teacher.f_ins.clone()))?;
    let token = match student.token_preds {
        Some(preds) => {
            // equal-width rows, so the mean of per-row MSEs is the overall MSE
            tape.mse(preds, tape.constant(teacher.token_targets.clone()))?
        }
        None if teacher.token_targets.rows() == 0 => tape.constant(Tensor::scalar(0.0)),
        None => {
            return Err(Error::DimensionMismatch(format!(
                "{} teacher targets but no student predictions",
                teacher.token_targets.rows()
            )))
        }
    };
    let total = tape.add(ins, token)?;
    Ok(Stage2Losses { ins, token, total })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{make_mask_plan, Arch};
    use crate::scene::{generate_scene, SceneSpec};
    use crate::tensor::grad_check;
    use crate::tokenize::sam_tokenize;

    fn arch() -> Arch {
        Arch {
            embed_dim: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            pointnet_hidden: 8,
            max_points_per_token: 8,
            feat2d_dim: 4,
        }
    }

    fn setup(seed: u64) -> (ModelParams, ModelParams, TokenInputs) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut student = ModelParams::init(&arch(), seed).unwrap();
        for q in student.params.values_mut() {
            q.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
        let mut teacher = ModelParams::init(&arch(), seed + 100).unwrap();
        for q in teacher.params.values_mut() {
            q.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
        teacher.freeze_all();
        let b = generate_scene(&SceneSpec {
            seed,
            ..SceneSpec::default()
        })
        .unwrap();
        let tokens = sam_tokenize(&b, 8).unwrap();
        let inputs = TokenInputs::new(&b.points_f64(), &tokens, 8).unwrap();
        (student, teacher, inputs)
    }

    fn losses(student: &ModelParams, t: &TeacherOutput, inputs: &TokenInputs, plan: &MaskPlan) -> (f64, f64, f64) {
        let tape = Tape::new();
        let p = student.bind(&tape);
        let s = student_forward(&p, inputs, plan).unwrap();
        let l = stage2_loss(&p, &s, t).unwrap();
        let v = |x| tape.value(x).item();
        (v(l.ins), v(l.token), v(l.total))
    }

    #[test]
    fn teacher_must_be_frozen() {
        let (student, _, inputs) = setup(0);
        let plan = MaskPlan::none(inputs.len());
        assert!(teacher_forward(&student, &inputs, &plan, false).is_err());
    }

    #[test]
    fn teacher_is_deterministic() {
        let (_, teacher, inputs) = setup(1);
        let plan = make_mask_plan(inputs.len(), 0.6, 1, 0, 0).unwrap();
        let a = teacher_forward(&teacher, &inputs, &plan, false).unwrap();
        assert_eq!(a, teacher_forward(&teacher, &inputs, &plan, false).unwrap());
        assert_eq!(a.token_targets.rows(), plan.masked.len());
    }

    #[test]
    fn unmasked_plan_has_no_token_loss() {
        let (student, teacher, inputs) = setup(2);
        let plan = make_mask_plan(inputs.len(), 0.0, 0, 0, 0).unwrap();
        let t = teacher_forward(&teacher, &inputs, &plan, false).unwrap();
        assert_eq!(t.token_targets.rows(), 0);
        let (ins, token, total) = losses(&student, &t, &inputs, &plan);
        assert_eq!(token, 0.0);
        assert_eq!(ins, total);
    }

    #[test]
    fn student_from_teacher_at_zero_ratio_measures_predictor_gap() {
        let (_, teacher, inputs) = setup(3);
        let mut student = teacher.clone();
        student.unfreeze_all();
        let plan = MaskPlan::none(inputs.len());
        let t = teacher_forward(&teacher, &inputs, &plan, false).unwrap();
        let tape = Tape::new();
        let p = student.bind(&tape);
        let s = student_forward(&p, &inputs, &plan).unwrap();
        assert_eq!(*tape.value(s.f_ins), t.f_ins);
        let pred = tape.value(predictor(&p, s.f_ins).unwrap()).clone();
        let gap: f64 = pred.data().iter().zip(t.f_ins.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 8.0;
        let l = stage2_loss(&p, &s, &t).unwrap();
        assert_eq!(tape.value(l.token).item(), 0.0);
        assert!((tape.value(l.ins).item() - gap).abs() < 1e-15);
    }

    #[test]
    fn single_token_at_sixty_percent_is_degenerate() {
        let (student, _, inputs) = setup(4);
        let one = inputs.subset(&[0]);
        let plan = make_mask_plan(1, 0.6, 0, 0, 0).unwrap();
        let tape = Tape::new();
        let p = student.bind(&tape);
        assert!(matches!(
            student_forward(&p, &one, &plan),
            Err(Error::DegeneratePlan { masked: 1, total: 1 })
        ));
    }

    #[test]
    fn matching_outputs_give_zero_loss() {
        let (student, _, inputs) = setup(5);
        let plan = make_mask_plan(inputs.len(), 0.6, 5, 0, 0).unwrap();
        let tape = Tape::new();
        let p = student.bind(&tape);
        let s = student_forward(&p, &inputs, &plan).unwrap();
        let t = TeacherOutput {
            f_ins: tape.value(predictor(&p, s.f_ins).unwrap()).clone(),
            token_targets: tape.value(s.token_preds.unwrap()).clone(),
        };
        let l = stage2_loss(&p, &s, &t).unwrap();
        assert_eq!(tape.value(l.total).item(), 0.0);
    }

    #[test]
    fn doubling_targets_quadruples_token_loss_at_zero_predictions() {
        let (mut student, teacher, inputs) = setup(6);
        // zero decoder output: zero final norm gain and shift
        student.get_mut("dec.ln.g").unwrap().data_mut().fill(0.0);
        student.get_mut("dec.ln.b").unwrap().data_mut().fill(0.0);
        let plan = make_mask_plan(inputs.len(), 0.6, 6, 0, 0).unwrap();
        let t = teacher_forward(&teacher, &inputs, &plan, false).unwrap();
        let mut t2 = t.clone();
        t2.token_targets.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let (_, a, _) = losses(&student, &t, &inputs, &plan);
        let (_, b, _) = losses(&student, &t2, &inputs, &plan);
        assert!(a > 0.0);
        assert!((b - 4.0 * a).abs() <= 1e-12 * b);
    }

    #[test]
    fn normalized_targets_have_unit_rows() {
        let (_, teacher, inputs) = setup(7);
        let plan = make_mask_plan(inputs.len(), 0.6, 7, 0, 0).unwrap();
        let t = teacher_forward(&teacher, &inputs, &plan, true).unwrap();
        for r in 0..t.token_targets.rows() {
            let n: f64 = t.token_targets.row_slice(r).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_permutation_permutes_predictions() {
        let (student, _, inputs) = setup(8);
        let m = inputs.len();
        let plan = make_mask_plan(m, 0.6, 8, 0, 0).unwrap();
        let perm: Vec<usize> = (0..m).rev().collect();
        let mut inv = vec![0; m];
        perm.iter().enumerate().for_each(|(k, &i)| inv[i] = k);
        let mut masked: Vec<usize> = plan.masked.iter().map(|&i| inv[i]).collect();
        let mut visible: Vec<usize> = plan.visible.iter().map(|&i| inv[i]).collect();
        masked.sort_unstable();
        visible.sort_unstable();
        let plan_p = MaskPlan { visible, masked, ratio: 0.6 };
        let run = |x: &TokenInputs, pl: &MaskPlan| {
            let tape = Tape::new();
            let p = student.bind(&tape);
            let s = student_forward(&p, x, pl).unwrap();
            let v = tape.value(s.token_preds.unwrap()).clone();
            v
        };
        let a = run(&inputs, &plan);
        let b = run(&inputs.subset(&perm), &plan_p);
        // row r of `a` is token plan.masked[r]; find it in the permuted plan
        for (r, &tok) in plan.masked.iter().enumerate() {
            let rp = plan_p.masked.iter().position(|&j| j == inv[tok]).unwrap();
            for (x, y) in a.row_slice(r).iter().zip(b.row_slice(rp)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradients_reach_only_the_student() {
        let (student, teacher, inputs) = setup(9);
        let plan = make_mask_plan(inputs.len(), 0.6, 9, 0, 0).unwrap();
        let t = teacher_forward(&teacher, &inputs, &plan, false).unwrap();
        let before = teacher.to_bytes();
        let tape = Tape::new();
        let tp = teacher.bind(&tape);
        let p = student.bind(&tape);
        let s = student_forward(&p, &inputs, &plan).unwrap();
        let l = stage2_loss(&p, &s, &t).unwrap();
        let grads = tape.backward(l.total).unwrap();
        assert!(tp.grads(&grads).is_empty());
        assert!(!p.grads(&grads).is_empty());
        assert_eq!(teacher.to_bytes(), before);
    }

    #[test]
    fn stage2_gradients_match_finite_differences() {
        let (student, teacher, inputs) = setup(10);
        let inputs = inputs.subset(&[0, 1, 2, 3]);
        let plan = make_mask_plan(4, 0.6, 10, 0, 0).unwrap();
        let t = teacher_forward(&teacher, &inputs, &plan, false).unwrap();
        let names: Vec<String> = student.params.keys().cloned().collect();
        let values: Vec<Tensor> = student.params.values().map(|q| q.value.clone()).collect();
        let a = arch();
        let check = grad_check(
            |tape, vars| {
                let p = Bound::from_vars(tape, &a, names.iter().cloned().zip(vars.iter().copied()));
                let s = student_forward(&p, &inputs, &plan)?;
                Ok(stage2_loss(&p, &s, &t)?.total)
            },
            &values,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-4, "{check:?}");
    }
}
