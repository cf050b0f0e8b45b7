//! Gradient checks of every training objective at small fp64 dimensions,
//! plus the structural probes that accompany them.

use std::fmt;
use std::str::FromStr;

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::adapter::{batch_loss, compose_input, soft_prompt, stage3_loss, Decoder, DecoderDims, FrozenDecoder};
use crate::bridge::train::{gtm_loss_for_pairs, GraphSide};
use crate::bridge::{gtc_loss, graph_memory, tokenize_code, Bridge, BridgeDims};
use crate::cge::{stage1_loss, Cge, CgeDims, Norm, Stage1Batch};
use crate::config::CgeConfig;
use crate::error::{Error, Result};
use crate::nn::gradcheck::{check_gradients, GradcheckSettings, GroupResult};
use crate::nn::{self, ParamStore};
use crate::store::{encode_features, FeaturedGraph};
use crate::synth::{extract_program, synth_corpus, TaskExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Stage1,
    Gtc,
    Gtm,
    Gtg,
    Stage3,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Stage1,
        Component::Gtc,
        Component::Gtm,
        Component::Gtg,
        Component::Stage3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Stage1 => "stage1",
            Component::Gtc => "gtc",
            Component::Gtm => "gtm",
            Component::Gtg => "gtg",
            Component::Stage3 => "stage3",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck component `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub component: Component,
    pub seed: u64,
    pub settings: GradcheckSettings,
    pub groups: Vec<GroupResult>,
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
    pub pass: bool,
}

const FEATURES: usize = 8;

fn toy_graphs(n: usize, seed: u64) -> Result<(Vec<FeaturedGraph>, Vec<String>)> {
    let progs = synth_corpus(n, seed);
    let graphs = progs
        .iter()
        .map(|p| Ok(encode_features(&extract_program(p)?, FEATURES)))
        .collect::<Result<Vec<_>>>()?;
    Ok((graphs, progs.iter().map(|p| p.code.clone()).collect()))
}

fn toy_cge_dims() -> CgeDims {
    CgeDims {
        d_in: FEATURES,
        d_hidden: 8,
        d_out: 8,
        layers: 2,
        heads: 2,
        dropout: 0.0,
        norm: Norm::Batch,
    }
}

fn toy_bridge(seed: u64) -> Result<Bridge> {
    let dims = BridgeDims {
        queries: 3,
        layers: 2,
        d_model: 8,
        heads: 2,
        ffn: 16,
        cross_freq: 2,
        max_len: 40,
        d_graph: 8,
        d_llm: 8,
    };
    Bridge::new(dims, 0.5, seed)
}

fn toy_decoder(seed: u64) -> Result<FrozenDecoder> {
    let dims = DecoderDims {
        d_llm: 8,
        layers: 1,
        heads: 2,
        ffn: 16,
        context: 512,
    };
    FrozenDecoder::freeze(Decoder::new(dims, seed)?)
}

/// Parameters that receive a gradient from `loss`, in name order.
fn reachable(loss: &dyn Fn() -> Result<Tensor>, stores: &[&ParamStore]) -> Result<Vec<(String, Var)>> {
    let grads = loss()?.backward()?;
    Ok(stores
        .iter()
        .flat_map(|s| s.named_vars())
        .filter(|(_, v)| grads.get(v.as_tensor()).is_some())
        .map(|(n, v)| (n.clone(), v.clone()))
        .collect())
}

fn probe(name: &str, pass: bool, detail: String) -> Probe {
    Probe {
        name: name.to_string(),
        pass,
        detail,
    }
}

/// Rows `0..=t` of the generative logits must not move when text after
/// position `t` changes.
fn causal_probe(bridge: &Bridge, memory: &Tensor, code: &str) -> Result<Probe> {
    let (input, _) = bridge.gtg_sequences(code)?;
    let t = input.len() / 2;
    let mut changed = input.clone();
    for id in changed.iter_mut().skip(t + 1) {
        *id = if *id == 4 + b'#' as u32 { 4 + b'!' as u32 } else { 4 + b'#' as u32 };
    }
    let a = bridge.generative_logits(memory, &input)?.narrow(0, 0, t + 1)?;
    let b = bridge.generative_logits(memory, &changed)?.narrow(0, 0, t + 1)?;
    let diff = nn::flat(&(a - b)?.abs()?)?.into_iter().fold(0.0, f64::max);
    Ok(probe(
        "causal_mask",
        diff == 0.0,
        format!("max change of rows 0..={t} after editing later tokens: {diff:e}"),
    ))
}

/// Runs one component at toy dimensions. `flip` negates the analytic
/// gradient of the named group (a harness self-test).
pub fn run_gradcheck(component: Component, seed: u64, flip: Option<&str>) -> Result<GradcheckReport> {
    let settings = GradcheckSettings::default();
    let (graphs, codes) = toy_graphs(3, seed)?;
    let mut probes = Vec::new();
    let groups = match component {
        Component::Stage1 => {
            let cge = Cge::new(toy_cge_dims(), seed)?;
            let cfg = CgeConfig {
                input: FEATURES,
                hidden: 8,
                output: 8,
                heads: 2,
                dropout: 0.0,
                ..CgeConfig::default()
            };
            let batch = Stage1Batch {
                graphs: graphs.iter().collect(),
                seed,
            };
            let loss = || Ok(stage1_loss(&cge, &batch, &cfg, true)?.total);
            let vars = reachable(&loss, &[&cge.params])?;
            check_gradients(&loss, &vars, &settings, seed, flip)?
        }
        Component::Gtc | Component::Gtm | Component::Gtg => {
            let cge = Cge::new(toy_cge_dims(), seed)?;
            let bridge = toy_bridge(seed)?;
            let memories = graphs
                .iter()
                .map(|g| Ok(graph_memory(&cge.encode_graph(g, false, 0)?)?.detach()))
                .collect::<Result<Vec<_>>>()?;
            let tokens: Vec<Vec<u32>> = codes.iter().map(|c| tokenize_code(c, bridge.dims.max_len)).collect();
            let h = || -> Result<Tensor> {
                let rows = tokens
                    .iter()
                    .map(|t| bridge.text_only_forward(t))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Tensor::stack(&rows, 0)?)
            };
            // negatives fixed up front so the matching loss is smooth in the parameters
            let pairs = [(0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (2, 0), (1, 0), (2, 1), (0, 2)];
            let loss: Box<dyn Fn() -> Result<Tensor>> = match component {
                Component::Gtc => Box::new(|| {
                    let b_q = memories
                        .iter()
                        .map(|m| bridge.query_forward(m))
                        .collect::<Result<Vec<_>>>()?;
                    gtc_loss(&b_q, &h()?, &bridge.tau()?)
                }),
                Component::Gtm => Box::new(|| Ok(gtm_loss_for_pairs(&bridge, &memories, &tokens, &h()?, &pairs)?.0)),
                _ => {
                    probes.push(causal_probe(&bridge, &memories[0], &codes[0])?);
                    Box::new(|| {
                        let per = memories
                            .iter()
                            .zip(&codes)
                            .map(|(m, c)| bridge.gtg_sequence_loss(m, c))
                            .collect::<Result<Vec<_>>>()?;
                        Ok(Tensor::stack(&per, 0)?.mean(0)?)
                    })
                }
            };
            let vars = reachable(&*loss, &[&bridge.params])?;
            check_gradients(&*loss, &vars, &settings, seed, flip)?
        }
        Component::Stage3 => {
            let cge = Cge::new(toy_cge_dims(), seed)?;
            let bridge = toy_bridge(seed)?;
            let decoder = toy_decoder(seed)?;
            let side = GraphSide::new(&cge, &graphs[..2], true)?;
            let progs = synth_corpus(2, seed);
            let examples: Vec<TaskExample> = progs.iter().map(TaskExample::from).collect();
            let idx = [0, 1];
            let loss = || batch_loss(&bridge, &side, &examples, &idx, &decoder);

            let grads = loss()?.backward()?;
            let leaked = decoder
                .params()
                .named_vars()
                .filter(|(_, v)| grads.get(v.as_tensor()).is_some())
                .count();
            probes.push(probe(
                "decoder_receives_no_gradient",
                leaked == 0,
                format!("{leaked} decoder tensors reached by backprop"),
            ));
            probes.push(masking_probe(&bridge, &side, &examples[0], &decoder)?);

            let vars = reachable(&loss, &[&bridge.params, &cge.params])?;
            let before = decoder.checksum().to_string();
            let groups = check_gradients(&loss, &vars, &settings, seed, flip)?;
            let after = decoder.params().checksum()?;
            probes.push(probe(
                "decoder_checksum_unchanged",
                before == after,
                format!("{before} -> {after}"),
            ));
            groups
        }
    };
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    let pass = groups.iter().all(|g| g.pass) && probes.iter().all(|p| p.pass);
    Ok(GradcheckReport {
        component,
        seed,
        settings,
        groups,
        probes,
        max_rel_error,
        pass,
    })
}

/// Rewrites every non-answer target and checks the loss is bit-identical.
fn masking_probe(bridge: &Bridge, side: &GraphSide<'_>, ex: &TaskExample, decoder: &FrozenDecoder) -> Result<Probe> {
    let p_g = soft_prompt(bridge, &side.memory(0)?, &ex.code)?;
    let mut composed = compose_input(&p_g, &ex.instruction, &ex.code, Some(&ex.answer), decoder)?;
    let base = nn::scalar(&stage3_loss(&composed, decoder)?)?;
    let mut rewritten = 0;
    for (t, &m) in composed.targets.iter_mut().zip(&composed.answer_mask) {
        if !m {
            *t = (*t + 17) % crate::bridge::VOCAB as u32;
            rewritten += 1;
        }
    }
    let after = nn::scalar(&stage3_loss(&composed, decoder)?)?;
    Ok(probe(
        "loss_masking",
        base == after,
        format!("{rewritten} prompt targets rewritten; loss {base} -> {after}"),
    ))
}
