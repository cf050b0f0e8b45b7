//! Tunes the bridge against a frozen decoder on docstring tasks, then
//! generates greedily for a program it has not seen.

use cgbridge::adapter::{evaluate_stage3, generate, pretrain_decoder, soft_prompt, train_stage3, FrozenDecoder};
use cgbridge::bridge::train::{train_stage2, GraphSide};
use cgbridge::bridge::BridgeDims;
use cgbridge::cge::train_stage1;
use cgbridge::config::{BridgeConfig, CgeConfig, DecoderConfig, Stage2Config, Stage3Config};
use cgbridge::store::encode_features;
use cgbridge::synth::{extract_program, synth_corpus, TaskExample};

fn main() -> cgbridge::Result<()> {
    let progs = synth_corpus(20, 5);
    let graphs = progs
        .iter()
        .map(|p| Ok(encode_features(&extract_program(p)?, 32)))
        .collect::<cgbridge::Result<Vec<_>>>()?;
    let tasks: Vec<TaskExample> = progs.iter().map(TaskExample::from).collect();
    let (train, held) = (&tasks[..16], &tasks[16..]);

    let ccfg = CgeConfig {
        input: 32,
        hidden: 32,
        output: 32,
        heads: 2,
        dropout: 0.0,
        lr: 3e-3,
        epochs: 5,
        ..CgeConfig::default()
    };
    let (cge, _) = train_stage1(&graphs[..16], &ccfg, 0)?;
    let dcfg = DecoderConfig {
        d_llm: 32,
        ffn: 64,
        context: 384,
        pretrain_epochs: 40,
        ..DecoderConfig::default()
    };
    let texts: Vec<String> = train.iter().flat_map(|t| [t.code.clone(), t.answer.clone()]).collect();
    let (decoder, trace) = pretrain_decoder(&texts, &dcfg, 0)?;
    println!("decoder pretraining {:.1} -> {:.1}", trace[0], trace[trace.len() - 1]);
    let decoder = FrozenDecoder::freeze(decoder)?;

    let bcfg = BridgeConfig {
        queries: 8,
        layers: 2,
        d_model: 32,
        heads: 4,
        ffn: 64,
        max_len: 64,
        ..BridgeConfig::default()
    };
    let codes: Vec<String> = train.iter().map(|t| t.code.clone()).collect();
    let side = GraphSide::new(&cge, &graphs[..16], false)?;
    let s2 = Stage2Config {
        lr: 3e-3,
        warmup_ratio: 0.0,
        epochs: 10,
        ..Stage2Config::default()
    };
    let (bridge, _) = train_stage2(&side, &codes, BridgeDims::new(&bcfg, 32, 32), &bcfg, &s2, 0)?;

    let held_side = GraphSide::new(&cge, &graphs[16..], false)?;
    let before = evaluate_stage3(&bridge, &held_side, held, &decoder)?;
    let s3 = Stage3Config {
        batch_size: 8,
        lr: 3e-3,
        warmup_ratio: 0.0,
        epochs: 30,
        max_new_tokens: 48,
        ..Stage3Config::default()
    };
    let report = train_stage3(&bridge, &side, train, &decoder, &s3, 0)?;
    let after = evaluate_stage3(&bridge, &held_side, held, &decoder)?;
    println!("train NLL {:.1} -> {:.1}, held-out {before:.1} -> {after:.1}", report.initial, report.last);
    println!("decoder untouched: {}", report.decoder_checksum_before == report.decoder_checksum_after);

    let t = &held[0];
    let p_g = soft_prompt(&bridge, &held_side.memory(0)?, &t.code)?;
    let out = generate(&p_g, &t.instruction, &t.code, &decoder, s3.max_new_tokens, s3.rep_penalty)?;
    println!("\n{}\n{}\ngenerated: {out:?}\nreference: {:?}", t.instruction, t.code, t.answer);
    Ok(())
}
