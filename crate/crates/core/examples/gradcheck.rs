//! Finite-difference gradient checks for every tape operation and for the
//! full FinEAS and BiLSTM stacks.
//!
//! cargo run --example gradcheck -- [RTOL] [H]

use fineas::models::{Batch, BiLstmModel, BiLstmSpec, EncoderSpec, FineasModel, Model, Pooling};
use fineas::numeric::{finite_diff_check_params, op_suite, GradCheckReport, Tensor};

fn stack(model: &Model, rtol: f64, h: f64) -> fineas::Result<GradCheckReport> {
    let batch = Batch::from_rows(&[vec![2, 5, 6, 3], vec![2, 7, 3]])?;
    let target = Tensor::new(&[2, 1], vec![0.4, -0.3])?;
    let mut params = model.params().clone();
    finite_diff_check_params(
        |g, p| {
            let mut local = model.clone();
            *local.params_mut() = p.clone();
            let y = local.forward(g, &batch)?;
            let t = g.constant(target.clone());
            let d = g.sub(y, t)?;
            let sq = g.mul(d, d)?;
            g.mean_all(sq)
        },
        &mut params,
        rtol,
        h,
    )
}

fn main() -> fineas::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let rtol = args.first().copied().unwrap_or(1e-4);
    let h = args.get(1).copied().unwrap_or(1e-5);

    let mut reports = op_suite(rtol, h)?;
    let mut spec = EncoderSpec::new(12, 8, 1, 2);
    spec.max_len = 8;
    spec.dropout_p = 0.0;
    let fineas = Model::Fineas(FineasModel::new(spec, Pooling::Mean, false, 3)?);
    reports.push(("fineas stack", stack(&fineas, rtol, h)?));
    let bilstm = Model::Bilstm(BiLstmModel::new(
        BiLstmSpec {
            vocab_size: 12,
            embed_dim: 4,
            hidden: 3,
            layers: 2,
            dropout_p: 0.0,
        },
        3,
    )?);
    reports.push(("bilstm stack", stack(&bilstm, rtol, h)?));

    println!("{:<14} {:>8} {:>12} {:>12}", "check", "entries", "max rel", "max abs");
    for (name, r) in &reports {
        println!(
            "{name:<14} {:>8} {:>12.3e} {:>12.3e} {}",
            r.checked,
            r.max_rel_error,
            r.max_abs_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = reports.iter().filter(|(_, r)| !r.passed()).count();
    println!("{failed} of {} checks above rtol {rtol:e}", reports.len());
    Ok(())
}
