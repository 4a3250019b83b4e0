//! Scratch: can the AR model learn the sum rule at all?
use maskdiff::decoding::decode_ar;
use maskdiff::knowledge::{answer_prompts, gen_arithmetic, ArithmeticCorpusConfig};
use maskdiff::model::{ModelConfig, Parametrization};
use maskdiff::trainer::*;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let seed: u64 = a.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let steps: u64 = a.get(2).map(|s| s.parse().unwrap()).unwrap_or(600);
    let batch: usize = a.get(3).map(|s| s.parse().unwrap()).unwrap_or(4);
    let lr_v: f64 = a.get(4).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let d_model: usize = a.get(5).map(|s| s.parse().unwrap()).unwrap_or(32);

    let corpus = gen_arithmetic(&ArithmeticCorpusConfig::new(1, 4, 1), 512, seed + 400).unwrap();
    let specials = corpus.vocab.specials();
    let model = ModelConfig {
        vocab_size: corpus.vocab.len(),
        d_model,
        n_layers: 2,
        n_heads: 2,
        max_len: 40,
        parametrization: Parametrization::Shifted,
    };
    let data = TrainData { corpus: corpus.sequences.clone(), context_len: 32, batch_size: batch, specials };
    let holdout = gen_arithmetic(&ArithmeticCorpusConfig::new(1, 4, 1), 64, seed + 900).unwrap();
    let prompts = answer_prompts(&holdout);
    let run = TrainRun {
        model: model.clone(),
        stages: vec![CurriculumStage {
            name: "ar".into(),
            objective: Objective::Ar,
            steps,
            lr: LrSchedule::constant(lr_v),
            warmup: None,
        }],
        optimizer: OptimizerConfig::default(),
        data: data.clone(),
        seed,
        compare_total_steps: None,
        eval: None,
    };
    let mut losses = Vec::new();
    let out = run_curriculum::<f32>(&run, None, |m| losses.push(m.loss)).unwrap();
    for (i, chunk) in losses.chunks(50).enumerate() {
        println!("steps {}..: mean loss {:.4}", i * 50, chunk.iter().sum::<f64>() / chunk.len() as f64);
    }
    let mut hits = 0;
    let mut examples = Vec::new();
    for (p, g) in &prompts {
        let mut bp = vec![specials.bos_id];
        bp.extend_from_slice(p);
        let out_toks = decode_ar(&out.params, &model, &specials, &bp, 1).unwrap();
        let got = out_toks.get(bp.len()).copied();
        if got == Some(g[0]) { hits += 1; }
        if examples.len() < 5 {
            examples.push(format!("want {} got {:?}", corpus.vocab.name(g[0]), got.map(|t| corpus.vocab.name(t).to_string())));
        }
    }
    println!("AR sum accuracy: {}/{}  e.g. {:?}", hits, prompts.len(), examples);
}
