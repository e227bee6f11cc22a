//! Expert modules injected into the frozen feed-forward sublayers.
//!
//! The main mechanism combines two branches per injection site:
//! - dynamic experts: low-rank residuals gated per token by a router that
//!   sees both the token features and the missing-modality pattern, with
//!   sparse top-K activation;
//! - static experts: one always-on shared low-rank expert plus one per
//!   modality whose fixed 0/1 coefficient depends on token modality and the
//!   presence pattern.
//!
//! The total residual `dh = h_dyn + h_stat` is folded into the frozen layer
//! as `LayerNorm(h_frozen + dh)`. The comparison paradigms (`AdaSite`,
//! `TaskSite`) inject plain additive residuals so that zeroing their
//! parameters reproduces the expert-free baseline exactly.

use rand_chacha::ChaCha8Rng;

use crate::config::{MamolConfig, MoeAdaConfig, MoeTaskConfig, RoutingGranularity, StaticGateRule};
use crate::data::MissingPattern;
use crate::error::Result;
use crate::params::{gaussian, Binder, ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};

/// Number of trainable values in one rank-`r` low-rank pair at width `d`.
pub fn lora_param_count(d_model: usize, rank: usize) -> usize {
    2 * d_model * rank
}

/// Low-rank residual pair: `f(z) = (z · A) · B` with `A [d×r]`, `B [r×d]`.
/// `B` starts at zero so every expert's initial residual is exactly zero.
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
}

impl LoraPair {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_model: usize,
        rank: usize,
    ) -> LoraPair {
        let std = 1.0 / (d_model as f64).sqrt();
        LoraPair {
            a: store.add(format!("{prefix}.a"), &[d_model, rank], gaussian(rng, d_model * rank, std), false),
            b: store.add(format!("{prefix}.b"), &[rank, d_model], vec![0.0; rank * d_model], false),
        }
    }

    pub fn apply(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        binder: &mut Binder,
        z: TensorId,
    ) -> Result<TensorId> {
        let a = binder.bind(tape, store, self.a);
        let b = binder.bind(tape, store, self.b);
        let za = tape.matmul(z, a)?;
        tape.matmul(za, b)
    }
}

/// Row geometry of the token matrix a site operates on: `num_samples`
/// contiguous blocks of `rows_per_sample` rows; `modality_of_row` gives the
/// source modality for each row within one sample block.
pub struct RowCtx<'a> {
    pub num_samples: usize,
    pub rows_per_sample: usize,
    pub modality_of_row: &'a [usize],
    pub patterns: &'a [MissingPattern],
}

impl RowCtx<'_> {
    pub fn total_rows(&self) -> usize {
        self.num_samples * self.rows_per_sample
    }
}

/// Pattern features bound once per tower forward.
pub struct PatternLeaves {
    /// `[total_rows × pat_dim]`, one row per token.
    pub rows: TensorId,
    /// `[num_samples × pat_dim]`, one row per sample.
    pub samples: TensorId,
}

/// Per-forward routing bookkeeping: recorded selections (replayable to pin
/// expert choice during finite differencing), expert usage counters, and
/// auxiliary loss terms.
#[derive(Default)]
pub struct RoutingState<'a> {
    pub forced: Option<&'a RecordedRouting>,
    pub site: usize,
    pub recorded: RecordedRouting,
    pub usage: Vec<u64>,
    pub aux: Vec<(&'static str, TensorId)>,
    pub with_aux: bool,
}

/// Selected expert indices per routing site, per routed row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecordedRouting {
    pub sites: Vec<Vec<Vec<usize>>>,
}

impl<'a> RoutingState<'a> {
    pub fn new(forced: Option<&'a RecordedRouting>, with_aux: bool) -> Self {
        RoutingState { forced, site: 0, recorded: RecordedRouting::default(), usage: Vec::new(), with_aux }
    }

    fn route(
        &mut self,
        tape: &mut Tape,
        gates_full: TensorId,
        k: usize,
        count_usage: bool,
    ) -> Result<TensorId> {
        let site = self.site;
        self.site += 1;
        let forced_rows = self.forced.map(|f| {
            f.sites
                .get(site)
                .unwrap_or_else(|| panic!("routing override missing site {site}"))
                .as_slice()
        });
        let gates = tape.sparsify_topk_with(gates_full, k, forced_rows)?;
        let selection = tape.topk_selection(gates).expect("sparsify records selection").to_vec();
        if count_usage {
            let n = tape.shape(gates)[1];
            if self.usage.len() < n {
                self.usage.resize(n, 0);
            }
            for row in &selection {
                for &e in row {
                    self.usage[e] += 1;
                }
            }
        }
        self.recorded.sites.push(selection);
        Ok(gates)
    }
}

/// How a site's output enters the frozen layer.
pub enum Injection {
    /// `h_frozen + dh`.
    Residual(TensorId),
    /// `LayerNorm(h_frozen + dh)` with the site's trainable affine.
    Normed { dh: TensorId, gamma: ParamId, beta: ParamId },
}

/// One mixture-of-LoRA injection site.
pub struct MamolSite {
    pub router_fw: Option<ParamId>,
    pub router_fb: Option<ParamId>,
    pub router_wt: Option<ParamId>,
    pub dynamic: Vec<LoraPair>,
    pub shared: Option<LoraPair>,
    pub modality: Vec<LoraPair>,
    pub ln: (ParamId, ParamId),
}

impl MamolSite {
    pub fn init(
        store: &mut ParamStore,
        seed_streams: &mut dyn FnMut(&str) -> ChaCha8Rng,
        prefix: &str,
        cfg: &MamolConfig,
        d_model: usize,
        d_router: usize,
        pat_dim: usize,
        num_modalities: usize,
    ) -> MamolSite {
        let (router_fw, router_fb, router_wt, dynamic) = if cfg.dynamic_enabled {
            let mut rng = seed_streams(&format!("{prefix}.router"));
            let in_dim = d_model + pat_dim;
            let fw = store.add(
                format!("{prefix}.router.fw"),
                &[in_dim, d_router],
                gaussian(&mut rng, in_dim * d_router, 1.0 / (in_dim as f64).sqrt()),
                false,
            );
            let fb = store.add(format!("{prefix}.router.fb"), &[d_router], vec![0.0; d_router], false);
            let wt = store.add(
                format!("{prefix}.router.wt"),
                &[d_router, cfg.num_dynamic_experts],
                gaussian(&mut rng, d_router * cfg.num_dynamic_experts, 1.0 / (d_router as f64).sqrt()),
                false,
            );
            let dynamic = (0..cfg.num_dynamic_experts)
                .map(|k| {
                    let mut rng = seed_streams(&format!("{prefix}.dyn.{k}"));
                    LoraPair::init(store, &mut rng, &format!("{prefix}.dyn.{k}"), d_model, cfg.lora_rank)
                })
                .collect();
            (Some(fw), Some(fb), Some(wt), dynamic)
        } else {
            (None, None, None, Vec::new())
        };

        let shared = cfg.static_shared_enabled.then(|| {
            let mut rng = seed_streams(&format!("{prefix}.shared"));
            LoraPair::init(store, &mut rng, &format!("{prefix}.shared"), d_model, cfg.lora_rank)
        });
        let modality = if cfg.static_modality_enabled {
            (0..num_modalities)
                .map(|j| {
                    let mut rng = seed_streams(&format!("{prefix}.mod.{j}"));
                    LoraPair::init(store, &mut rng, &format!("{prefix}.mod.{j}"), d_model, cfg.lora_rank)
                })
                .collect()
        } else {
            Vec::new()
        };

        let ln = (
            store.add(format!("{prefix}.ln.g"), &[d_model], vec![1.0; d_model], false),
            store.add(format!("{prefix}.ln.b"), &[d_model], vec![0.0; d_model], false),
        );
        MamolSite { router_fw, router_fb, router_wt, dynamic, shared, modality, ln }
    }

    /// Pattern-routed sparse mixture over the dynamic experts:
    /// `h_dyn[t] = sum_k gate_k(t) * (z_t · A_k) · B_k` over the selected K.
    fn dynamic_forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        binder: &mut Binder,
        z: TensorId,
        pats: &PatternLeaves,
        rows: &RowCtx,
        cfg: &MamolConfig,
        routing: &mut RoutingState,
    ) -> Result<TensorId> {
        let (fw, fb, wt) = (
            self.router_fw.expect("dynamic branch"),
            self.router_fb.expect("dynamic branch"),
            self.router_wt.expect("dynamic branch"),
        );
        // Router input: [z ; m_type], per token or per pooled sample.
        let (router_z, pat, expand) = match cfg.routing_granularity {
            RoutingGranularity::Token => (z, pats.rows, 1),
            RoutingGranularity::Sample => {
                let mut pooled = Vec::with_capacity(rows.num_samples);
                for s in 0..rows.num_samples {
                    let block = tape.narrow_rows(z, s * rows.rows_per_sample, rows.rows_per_sample)?;
                    pooled.push(tape.mean_rows(block)?);
                }
                let stacked = tape.concat_rows(&pooled)?;
                (stacked, pats.samples, rows.rows_per_sample)
            }
        };
        let rin = tape.concat_last_axis(router_z, pat)?;
        let fwt = binder.bind(tape, store, fw);
        let fbt = binder.bind(tape, store, fb);
        let wtt = binder.bind(tape, store, wt);
        let hidden = tape.matmul(rin, fwt)?;
        let hidden = tape.add_row(hidden, fbt)?;
        let hidden = tape.gelu(hidden);
        let logits = tape.matmul(hidden, wtt)?;
        let gates_full = tape.softmax(logits);
        let gates = routing.route(tape, gates_full, cfg.top_k, true)?;

        if routing.with_aux && cfg.balance_coeff > 0.0 {
            let aux = importance_balance(tape, gates_full, cfg.balance_coeff)?;
            routing.aux.push(("balance", aux));
        }

        let gates_tok = if expand > 1 { tape.repeat_rows(gates, expand)? } else { gates };
        let mut acc: Option<TensorId> = None;
        for (k, pair) in self.dynamic.iter().enumerate() {
            let res = pair.apply(store, tape, binder, z)?;
            let gcol = tape.narrow_cols(gates_tok, k, 1)?;
            let contrib = tape.mul_col(res, gcol)?;
            acc = Some(match acc {
                None => contrib,
                Some(a) => tape.add(a, contrib)?,
            });
        }
        Ok(acc.expect("at least one dynamic expert"))
    }

    /// Static branch: shared expert everywhere plus modality-specific experts
    /// with fixed 0/1 coefficients per token.
    fn static_forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        binder: &mut Binder,
        z: TensorId,
        rows: &RowCtx,
        rule: StaticGateRule,
    ) -> Result<Option<TensorId>> {
        let mut acc: Option<TensorId> = None;
        if let Some(shared) = &self.shared {
            acc = Some(shared.apply(store, tape, binder, z)?);
        }
        for (j, pair) in self.modality.iter().enumerate() {
            let mask = modality_coefficients(rows, j, rule);
            if mask.iter().all(|&w| w == 0.0) {
                continue;
            }
            let res = pair.apply(store, tape, binder, z)?;
            let masked = tape.scale_rows(res, &mask)?;
            acc = Some(match acc {
                None => masked,
                Some(a) => tape.add(a, masked)?,
            });
        }
        Ok(acc)
    }

    /// Aggregated residual `dh = h_dyn + h_stat`, wrapped for normed
    /// injection. Disabled branches contribute exactly zero.
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        binder: &mut Binder,
        z: TensorId,
        pats: &PatternLeaves,
        rows: &RowCtx,
        cfg: &MamolConfig,
        routing: &mut RoutingState,
    ) -> Result<Injection> {
        let mut dh: Option<TensorId> = None;
        if cfg.dynamic_enabled {
            dh = Some(self.dynamic_forward(store, tape, binder, z, pats, rows, cfg, routing)?);
        }
        if let Some(stat) = self.static_forward(store, tape, binder, z, rows, cfg.static_gate_rule)? {
            dh = Some(match dh {
                None => stat,
                Some(d) => tape.add(d, stat)?,
            });
        }
        let dh = match dh {
            Some(d) => d,
            None => {
                let shape = tape.shape(z).to_vec();
                let n = shape.iter().product();
                tape.leaf(&shape, vec![0.0; n])
            }
        };
        Ok(Injection::Normed { dh, gamma: self.ln.0, beta: self.ln.1 })
    }
}

/// Fixed static coefficient of modality expert `j` for every token row.
fn modality_coefficients(rows: &RowCtx, j: usize, rule: StaticGateRule) -> Vec<f64> {
    let mut mask = vec![0.0; rows.total_rows()];
    for s in 0..rows.num_samples {
        let pat = rows.patterns[s];
        for (t, &m) in rows.modality_of_row.iter().enumerate() {
            if m != j {
                continue;
            }
            let on = match rule {
                StaticGateRule::Present => pat.is_present(j),
                StaticGateRule::Absent => !pat.is_present(j),
                StaticGateRule::Always => true,
            };
            if on {
                mask[s * rows.rows_per_sample + t] = 1.0;
            }
        }
    }
    mask
}

/// Squared coefficient of variation of per-expert importance (summed gates),
/// scaled by `coeff`. Zero when every expert receives equal mass.
fn importance_balance(tape: &mut Tape, gates_full: TensorId, coeff: f64) -> Result<TensorId> {
    let n = tape.shape(gates_full)[1];
    let imp = tape.mean_rows(gates_full)?;
    let imp_col = tape.reshape(imp, &[n, 1])?;
    let mu = tape.mean_rows(imp_col)?;
    let neg_mu = tape.scale(mu, -1.0);
    let centered = tape.add_row(imp_col, neg_mu)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_rows(sq)?;
    let mu2 = tape.mul(mu, mu)?;
    let eps = tape.leaf(&[1, 1], vec![1e-12]);
    let denom = tape.add(mu2, eps)?;
    let cv2 = tape.div(var, denom)?;
    Ok(tape.scale(cv2, coeff))
}

/// Bottleneck adapter experts with input-only gating (no pattern signal).
pub struct AdaSite {
    pub gate_w: ParamId,
    pub experts: Vec<AdapterExpert>,
}

pub struct AdapterExpert {
    pub dw: ParamId,
    pub db: ParamId,
    pub uw: ParamId,
    pub ub: ParamId,
}

impl AdapterExpert {
    fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        bottleneck: usize,
        out_dim: usize,
        zero_up: bool,
    ) -> AdapterExpert {
        let std = 1.0 / (in_dim as f64).sqrt();
        let up = if zero_up {
            vec![0.0; bottleneck * out_dim]
        } else {
            gaussian(rng, bottleneck * out_dim, 1.0 / (bottleneck as f64).sqrt())
        };
        AdapterExpert {
            dw: store.add(format!("{prefix}.dw"), &[in_dim, bottleneck], gaussian(rng, in_dim * bottleneck, std), false),
            db: store.add(format!("{prefix}.db"), &[bottleneck], vec![0.0; bottleneck], false),
            uw: store.add(format!("{prefix}.uw"), &[bottleneck, out_dim], up, false),
            ub: store.add(format!("{prefix}.ub"), &[out_dim], vec![0.0; out_dim], false),
        }
    }

    pub fn apply(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        binder: &mut Binder,
        x: TensorId,
    ) -> Result<TensorId> {
        let dw = binder.bind(tape, store, self.dw);
        let db = binder.bind(tape, store, self.db);
        let uw = binder.bind(tape, store, self.uw);
        let ub = binder.bind(tape, store, self.ub);
        let h = tape.matmul(x, dw)?;
        let h = tape.add_row(h, db)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, uw)?;
        tape.add_row(h, ub)
    }
}

impl AdaSite {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &MoeAdaConfig,
        d_model: usize,
    ) -> AdaSite {
        let gate_w = store.add(
            format!("{prefix}.gate"),
            &[d_model, cfg.num_experts],
            gaussian(rng, d_model * cfg.num_experts, 1.0 / (d_model as f64).sqrt()),
            false,
        );
        let experts = (0..cfg.num_experts)
            .map(|k| {
                AdapterExpert::init(store, rng, &format!("{prefix}.exp.{k}"), d_model, cfg.bottleneck, d_model, true)
            })
            .collect();
        AdaSite { gate_w, experts }
    }

    /// Input-gated adapter mixture; two tokens with equal `z` route the same
    /// way regardless of pattern.
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        binder: &mut Binder,
        z: TensorId,
        cfg: &MoeAdaConfig,
        routing: &mut RoutingState,
    ) -> Result<Injection> {
        let gw = binder.bind(tape, store, self.gate_w);
        let logits = tape.matmul(z, gw)?;
        let gates_full = tape.softmax(logits);
        let gates = routing.route(tape, gates_full, cfg.top_k, false)?;
        let mut acc: Option<TensorId> = None;
        for (k, expert) in self.experts.iter().enumerate() {
            let res = expert.apply(store, tape, binder, z)?;
            let gcol = tape.narrow_cols(gates, k, 1)?;
            let contrib = tape.mul_col(res, gcol)?;
            acc = Some(match acc {
                None => contrib,
                Some(a) => tape.add(a, contrib)?,
            });
        }
        Ok(Injection::Residual(acc.expect("at least one adapter expert")))
    }
}

/// Pattern-only routing over full feed-forward adapter experts.
pub struct TaskSite {
    pub route_w: ParamId,
    pub experts: Vec<FfnExpert>,
}

pub struct FfnExpert {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl TaskSite {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &MoeTaskConfig,
        d_model: usize,
        pat_dim: usize,
    ) -> TaskSite {
        let route_w = store.add(
            format!("{prefix}.route"),
            &[pat_dim, cfg.num_experts],
            gaussian(rng, pat_dim * cfg.num_experts, 1.0),
            false,
        );
        let experts = (0..cfg.num_experts)
            .map(|k| {
                let std = 1.0 / (d_model as f64).sqrt();
                FfnExpert {
                    w1: store.add(
                        format!("{prefix}.exp.{k}.w1"),
                        &[d_model, cfg.hidden],
                        gaussian(rng, d_model * cfg.hidden, std),
                        false,
                    ),
                    b1: store.add(format!("{prefix}.exp.{k}.b1"), &[cfg.hidden], vec![0.0; cfg.hidden], false),
                    w2: store.add(
                        format!("{prefix}.exp.{k}.w2"),
                        &[cfg.hidden, d_model],
                        vec![0.0; cfg.hidden * d_model],
                        false,
                    ),
                    b2: store.add(format!("{prefix}.exp.{k}.b2"), &[d_model], vec![0.0; d_model], false),
                }
            })
            .collect();
        TaskSite { route_w, experts }
    }

    /// Routes on the missing pattern alone; all tokens of a sample share one
    /// expert assignment.
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        binder: &mut Binder,
        z: TensorId,
        pats: &PatternLeaves,
        cfg: &MoeTaskConfig,
        routing: &mut RoutingState,
    ) -> Result<Injection> {
        let rw = binder.bind(tape, store, self.route_w);
        let logits = tape.matmul(pats.rows, rw)?;
        let gates_full = tape.softmax(logits);
        let gates = routing.route(tape, gates_full, cfg.top_k, false)?;
        let mut acc: Option<TensorId> = None;
        for (k, expert) in self.experts.iter().enumerate() {
            let w1 = binder.bind(tape, store, expert.w1);
            let b1 = binder.bind(tape, store, expert.b1);
            let w2 = binder.bind(tape, store, expert.w2);
            let b2 = binder.bind(tape, store, expert.b2);
            let h = tape.matmul(z, w1)?;
            let h = tape.add_row(h, b1)?;
            let h = tape.gelu(h);
            let h = tape.matmul(h, w2)?;
            let res = tape.add_row(h, b2)?;
            let gcol = tape.narrow_cols(gates, k, 1)?;
            let contrib = tape.mul_col(res, gcol)?;
            acc = Some(match acc {
                None => contrib,
                Some(a) => tape.add(a, contrib)?,
            });
        }
        Ok(Injection::Residual(acc.expect("at least one task expert")))
    }
}

/// Estimators that synthesize an absent modality's encoded block from the
/// mean-pooled features of the modalities that are present.
pub struct RepEstimator {
    pub gate_w: ParamId,
    pub experts: Vec<AdapterExpert>,
}

impl RepEstimator {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        modality: usize,
        num_experts: usize,
        bottleneck: usize,
        d_model: usize,
        tokens: usize,
    ) -> RepEstimator {
        let gate_w = store.add(
            format!("rep.{modality}.gate"),
            &[d_model, num_experts],
            gaussian(rng, d_model * num_experts, 1.0 / (d_model as f64).sqrt()),
            false,
        );
        let experts = (0..num_experts)
            .map(|k| {
                AdapterExpert::init(
                    store,
                    rng,
                    &format!("rep.{modality}.exp.{k}"),
                    d_model,
                    bottleneck,
                    tokens * d_model,
                    false,
                )
            })
            .collect();
        RepEstimator { gate_w, experts }
    }

    /// `pooled [K×d] -> estimated blocks [K×(tokens·d)]`, densely gated.
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        binder: &mut Binder,
        pooled: TensorId,
    ) -> Result<TensorId> {
        let gw = binder.bind(tape, store, self.gate_w);
        let logits = tape.matmul(pooled, gw)?;
        let gates = tape.softmax(logits);
        let mut acc: Option<TensorId> = None;
        for (k, expert) in self.experts.iter().enumerate() {
            let res = expert.apply(store, tape, binder, pooled)?;
            let gcol = tape.narrow_cols(gates, k, 1)?;
            let contrib = tape.mul_col(res, gcol)?;
            acc = Some(match acc {
                None => contrib,
                Some(a) => tape.add(a, contrib)?,
            });
        }
        Ok(acc.expect("at least one estimator expert"))
    }
}
