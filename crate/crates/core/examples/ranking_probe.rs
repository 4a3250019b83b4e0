//! Scratch: diagnose curriculum-ranking accuracies per stage.
use maskdiff::decoding::{decode_ar, decode_blockwise, DecodeConfig};
use maskdiff::knowledge::{answer_prompts, gen_arithmetic, ArithmeticCorpusConfig};
use maskdiff::model::{ModelConfig, Parametrization};
use maskdiff::trainer::*;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let seed: u64 = a.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let total: u64 = a.get(2).map(|s| s.parse().unwrap()).unwrap_or(360);
    let batch: usize = a.get(3).map(|s| s.parse().unwrap()).unwrap_or(4);
    let lr_peak: f64 = a.get(4).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let corpus_n: usize = a.get(5).map(|s| s.parse().unwrap()).unwrap_or(512);
    let d_model: usize = a.get(6).map(|s| s.parse().unwrap()).unwrap_or(32);

    let corpus = gen_arithmetic(&ArithmeticCorpusConfig::new(1, 4, 1), corpus_n, seed + 400).unwrap();
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
    let lr = LrSchedule { peak: lr_peak, final_lr: lr_peak / 4.0 };

    let block1_acc = |params: &maskdiff::model::Parameters<f32>| -> f64 {
        let dcfg = DecodeConfig { block_size: 1, steps_per_block: 1, commits_per_step: 1, max_new_tokens: 1 };
        let m = ModelConfig { parametrization: Parametrization::Unshifted, ..model.clone() };
        let mut hits = 0;
        for (p, g) in &prompts {
            let out = decode_blockwise(params, &m, &specials, p, &dcfg).unwrap();
            if out.len() > p.len() && out[p.len()] == g[0] { hits += 1; }
        }
        hits as f64 / prompts.len() as f64
    };
    let ar_acc = |params: &maskdiff::model::Parameters<f32>| -> f64 {
        let m = ModelConfig { parametrization: Parametrization::Shifted, ..model.clone() };
        let mut hits = 0;
        for (p, g) in &prompts {
            let mut bp = vec![specials.bos_id];
            bp.extend_from_slice(p);
            let out = decode_ar(params, &m, &specials, &bp, 1).unwrap();
            if out.len() > bp.len() && out[bp.len()] == g[0] { hits += 1; }
        }
        hits as f64 / prompts.len() as f64
    };

    for (label, scheme) in [
        ("scheme1 AR->BiDLLM", CurriculumScheme::ArThenBiDllm),
        ("scheme3 BiDLLM", CurriculumScheme::BiDllmOnly),
    ] {
        let run = TrainRun {
            model: model.clone(),
            stages: scheme_stages(scheme, total, lr, 1e-3).unwrap(),
            optimizer: OptimizerConfig::default(),
            data: data.clone(),
            seed,
            compare_total_steps: Some(total),
            eval: None,
        };
        let mut losses = Vec::new();
        let out = run_curriculum::<f32>(&run, None, |m| losses.push(m.loss)).unwrap();
        let tail_loss: f64 = losses[losses.len().saturating_sub(20)..].iter().sum::<f64>() / 20.0;
        print!("tail_loss={tail_loss:.4} ");
        print!("{label}: final block1={:.3} ar={:.3}", block1_acc(&out.params), ar_acc(&out.params));
        for (name, p) in &out.stage_params {
            print!("  [{name}: block1={:.3} ar={:.3}]", block1_acc(p), ar_acc(p));
        }
        println!();
    }
}
