// Does multi-config training generalize? 7x600 mixed samples share rule tables.
use rand::seq::SliceRandom;
use rand::SeedableRng;
use ravencl_core::continual::*;
use ravencl_core::model::*;
use ravencl_core::taskgen::TaskKind;

fn main() {
    let dims = ModelDims::default();
    let hyper = TrainHyper::default();
    let pool = TaskPool::generate(600, 200, 1).unwrap();
    let encoded = pool.encode();

    let all_train: Vec<&EncodedProblem> = encoded.train.iter().flat_map(|t| t.iter()).collect();
    let mut params = ModelParams::init(dims, 2);
    let mut adam = AdamState::new(dims.param_count());
    let mut scratch = Scratch::new(dims);
    let mut grads = vec![0.0; dims.param_count()];
    let mut order: Vec<usize> = (0..all_train.len()).collect();

    for epoch in 0..150 {
        let mut rng = rand::rngs::StdRng::seed_from_u64(epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for &i in chunk {
                loss += accumulate_loss_and_grads(
                    &params,
                    all_train[i],
                    all_train[i].answer,
                    &mut scratch,
                    &mut grads,
                );
            }
            let _ = loss;
            grads.iter_mut().for_each(|g| *g /= chunk.len() as f64);
            adam_step(&mut params.theta, &grads, &mut adam, &hyper.adam);
        }
        if [9, 24, 49, 99, 149].contains(&epoch) {
            print!("epoch {:3}: ", epoch + 1);
            let mut total = 0.0;
            for (k, kind) in TaskKind::ALL.iter().enumerate() {
                let acc = evaluate_encoded(&params, &encoded.test[k], &mut scratch)
                    .unwrap()
                    .accuracy;
                total += acc;
                print!("{}={:.3} ", kind.name(), acc);
            }
            println!("mean={:.3}", total / 7.0);
        }
    }
}
