// Diagnosis: is the base task undertrained, data-starved, or broken?
use ravencl_core::continual::*;
use ravencl_core::model::*;
use ravencl_core::taskgen::{generate_dataset, TaskKind};

fn acc(params: &ModelParams, data: &[EncodedProblem]) -> f64 {
    let mut s = Scratch::new(params.dims);
    evaluate_encoded(params, data, &mut s).unwrap().accuracy
}

fn main() {
    let dims = ModelDims::default();
    let hyper = TrainHyper::default();

    for (n_train, epochs) in [(600, 50), (600, 200), (3000, 50), (6000, 50)] {
        let (train, test) = generate_dataset(TaskKind::Center, n_train, 200, 1).unwrap();
        let train_enc = encode_dataset(&train);
        let test_enc = encode_dataset(&test);

        let params = ModelParams::init(dims, 2);
        let mut trainer_params = params.clone();
        let mut adam = AdamState::new(dims.param_count());
        let mut scratch = Scratch::new(dims);
        let mut grads = vec![0.0; dims.param_count()];
        let mut last_loss = 0.0;
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut order: Vec<usize> = (0..train_enc.len()).collect();
        for epoch in 0..epochs {
            let mut rng = rand::rngs::StdRng::seed_from_u64(epoch as u64);
            order.shuffle(&mut rng);
            for chunk in order.chunks(hyper.batch_size) {
                grads.iter_mut().for_each(|g| *g = 0.0);
                let mut loss = 0.0;
                for &i in chunk {
                    loss += accumulate_loss_and_grads(
                        &trainer_params,
                        &train_enc[i],
                        train_enc[i].answer,
                        &mut scratch,
                        &mut grads,
                    );
                }
                loss /= chunk.len() as f64;
                grads.iter_mut().for_each(|g| *g /= chunk.len() as f64);
                adam_step(&mut trainer_params.theta, &grads, &mut adam, &hyper.adam);
                last_loss = loss;
            }
            if epoch % 25 == 24 || epoch == epochs - 1 {
                println!(
                    "n={n_train} epoch {:3}: loss={:.3} train_acc={:.3} test_acc={:.3}",
                    epoch + 1,
                    last_loss,
                    acc(&trainer_params, &train_enc[..600.min(train_enc.len())]),
                    acc(&trainer_params, &test_enc)
                );
            }
        }
        println!("---");
    }
}
