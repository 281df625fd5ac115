// Throwaway calibration pilot: desk-scale base init + one streaming run.
use std::time::Instant;

use ravencl_core::config::mix_seed;
use ravencl_core::continual::*;
use ravencl_core::model::ModelDims;
use ravencl_core::replay::{Balance, PolicyKind};

fn main() {
    let t0 = Instant::now();
    let pool = TaskPool::generate(600, 200, 1).unwrap();
    let encoded = pool.encode();
    println!("datasets: {:.1}s", t0.elapsed().as_secs_f64());

    let hyper = TrainHyper::default();
    let dims = ModelDims::default();
    let schedule = build_schedule(&encoded, 1, mix_seed(3, 1));

    let t1 = Instant::now();
    let base = base_initialize(&schedule, dims, &hyper, 2).unwrap();
    println!("base init (50 epochs x 600): {:.1}s", t1.elapsed().as_secs_f64());
    let mut scratch = ravencl_core::model::Scratch::new(dims);
    for (i, test) in schedule.test.iter().enumerate() {
        let acc = ravencl_core::model::evaluate_encoded(&base, test, &mut scratch).unwrap().accuracy;
        print!("task{}({})={:.3} ", i, schedule.kinds[i].name(), acc);
    }
    println!();

    let t2 = Instant::now();
    let fts = stream_train(&LearnerKind::FineTuneStream, &base, &schedule, &hyper).unwrap();
    println!("fine-tune stream: {:.1}s", t2.elapsed().as_secs_f64());
    let r = fts.r_matrix().unwrap();
    println!("FTS first-task accuracy after final task: {:.3}", r.get(6, 0));
    println!("FTS final row: {:?}", r.rows().last().unwrap().iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>());

    let t3 = Instant::now();
    let pr = stream_train(
        &LearnerKind::PartialReplay {
            policy: PolicyKind::MinReplays,
            balance: Balance::Unbalanced,
            replay_size: 32,
        },
        &base,
        &schedule,
        &hyper,
    )
    .unwrap();
    println!("partial replay r=32: {:.1}s", t3.elapsed().as_secs_f64());
    let r = pr.r_matrix().unwrap();
    println!("PR final row: {:?}", r.rows().last().unwrap().iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>());

    let t4 = Instant::now();
    let off = offline_train(&schedule, dims, &hyper, 5).unwrap();
    println!("offline (7 prefixes, early stop): {:.1}s", t4.elapsed().as_secs_f64());
    let ro = off.r_matrix().unwrap();
    println!("offline diagonal: {:?}", (0..7).map(|i| (ro.get(i, i) * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    println!("offline final row mean: {:.3}", ro.row_mean(6));

    use ravencl_core::metrics::{bwt, omega};
    println!(
        "FTS omega={:.3} bwt={:.3} | PR omega={:.3} bwt={:.3}",
        omega(&fts.r_matrix().unwrap(), &ro).unwrap(),
        bwt(&fts.r_matrix().unwrap()).unwrap(),
        omega(&pr.r_matrix().unwrap(), &ro).unwrap(),
        bwt(&pr.r_matrix().unwrap()).unwrap(),
    );
    println!("total: {:.1}s", t0.elapsed().as_secs_f64());
}
