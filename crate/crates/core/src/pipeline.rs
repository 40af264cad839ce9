//! End-to-end certification of a latent agent: the latent MDP is extracted
//! by frequency estimation on one trace, and the local losses are estimated
//! on a second, independent trace.

use std::cell::Cell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checker::{lipschitz_constants, value_iteration, LatentMc, LipschitzConstants, Objective};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::latent::{
    argmax, embed_trace, sample_index, CountTable, LatentAgent, LatentMdp, LatentPolicy, LatentState, LatentTrace,
};
use crate::mdp::{rollout_with, Action, GroundState, Trace};
use crate::pac::{
    assemble_certificate, estimate_losses, required_samples_loss, required_samples_value, CertificateReport,
    EstimateOptions, ObjectiveSummary, PacParams,
};

/// Tolerance of the value iteration behind objective summaries.
const VALUE_TOL: f64 = 1e-9;

/// How the latent policy picks its action during collection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSelection {
    /// Most likely latent action; the certified policy is deterministic.
    #[default]
    Greedy,
    /// Latent action drawn from the policy distribution.
    Sampled,
}

/// Runs the latent agent alone for `steps` steps. The latent action taken at
/// each step is recorded directly rather than re-encoded from the ground
/// action.
pub fn collect_latent(
    env: &Environment,
    agent: &dyn LatentAgent,
    steps: usize,
    seed: u64,
    selection: ActionSelection,
) -> Result<(Trace, LatentTrace)> {
    let mut chosen = Vec::with_capacity(steps);
    let trace = rollout_with(env, steps, seed, |s, rngs| {
        let s_bar = agent.embed(s, env.label(s))?;
        let probs = agent.action_probs(s_bar)?;
        let a_bar = match selection {
            ActionSelection::Greedy => argmax(&probs),
            ActionSelection::Sampled => sample_index(&probs, &mut rngs.policy),
        };
        chosen.push(a_bar);
        agent.decode_action(s, s_bar, a_bar)
    })?;
    let cursor = Cell::new(0usize);
    let recorded = |_: &GroundState, _: LatentState, _: &Action| {
        let i = cursor.get();
        cursor.set(i + 1);
        Ok(chosen[i])
    };
    let latent = embed_trace(&trace, agent, Some(&recorded))?;
    Ok((trace, latent))
}

/// Length of the longest prefix whose final successor also occurs as a
/// source within the prefix. Successors of earlier steps are sources by
/// chaining, so every state of the prefix then has an outgoing row.
pub fn closed_prefix(trace: &LatentTrace) -> usize {
    let mut first_source: BTreeMap<LatentState, usize> = BTreeMap::new();
    for (t, step) in trace.steps.iter().enumerate() {
        first_source.entry(step.s).or_insert(t);
    }
    (1..=trace.len())
        .rev()
        .find(|&k| first_source.get(&trace.steps[k - 1].s_next).is_some_and(|&t| t < k))
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentExtraction {
    pub mdp: LatentMdp,
    pub policy: LatentPolicy,
    pub mc: LatentMc,
    /// Transitions of the fitting trace kept after closing it.
    pub transitions_used: usize,
}

/// Frequency-estimated latent MDP of `trace`, the agent's policy on its
/// states and the induced chain.
pub fn extract_latent_model(
    agent: &dyn LatentAgent,
    trace: &LatentTrace,
    selection: ActionSelection,
) -> Result<LatentExtraction> {
    let n = closed_prefix(trace);
    if n == 0 {
        return Err(Error::invalid("the fitting trace never revisits a latent state"));
    }
    let closed = LatentTrace { n_ap: trace.n_ap, steps: trace.steps[..n].to_vec() };
    let n_actions = agent.n_latent_actions();
    let mdp = CountTable::from_trace(&closed, agent.n_bits(), n_actions)?.frequency_estimate();
    let mut table = BTreeMap::new();
    for s in mdp.states() {
        let probs = agent.action_probs(s)?;
        let row = match selection {
            ActionSelection::Greedy => {
                let mut row = vec![0.0; n_actions];
                row[argmax(&probs)] = 1.0;
                row
            }
            ActionSelection::Sampled => probs,
        };
        table.insert(s, row);
    }
    let policy = LatentPolicy { n_actions, table };
    let mc = LatentMc::induced(&mdp, &policy)?;
    Ok(LatentExtraction { mdp, policy, mc, transitions_used: n })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifyOptions {
    pub params: PacParams,
    pub estimate: EstimateOptions,
    pub selection: ActionSelection,
    /// Length of the trace the latent MDP is fitted on.
    pub fit_steps: usize,
    /// Length of the estimation trace. By default it is the burn-in plus
    /// exactly the number of kept transitions the guarantees require.
    pub steps: Option<usize>,
    /// Refuse to collect estimation traces longer than this.
    pub max_steps: usize,
    /// Its discount is replaced by the certificate's.
    pub objective: Option<Objective>,
    pub seed: u64,
}

impl CertifyOptions {
    pub fn new(params: PacParams, seed: u64) -> Self {
        CertifyOptions {
            params,
            estimate: EstimateOptions::default(),
            selection: ActionSelection::Greedy,
            fit_steps: 100_000,
            steps: None,
            max_steps: 10_000_000,
            objective: None,
            seed,
        }
    }

    /// Seed of the estimation trace, distinct from the fitting seed.
    pub fn estimation_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }
}

/// Transitions needed for both guarantees given the chain's constants.
pub fn required_transitions(params: &PacParams, consts: &LipschitzConstants) -> Result<u64> {
    Ok(required_samples_loss(params)?.max(required_samples_value(params, consts.kv)?))
}

#[derive(Clone, Debug)]
pub struct Certification {
    pub report: CertificateReport,
    pub extraction: LatentExtraction,
}

/// Fits the latent model, estimates the local losses on an independent
/// trace and assembles the certificate. `provenance` is extended with the
/// seeds, trace digests and estimation options.
pub fn certify(
    env: &Environment,
    agent: &dyn LatentAgent,
    opts: &CertifyOptions,
    mut provenance: BTreeMap<String, serde_json::Value>,
) -> Result<Certification> {
    let p = opts.params;
    p.validate()?;
    let (fit_trace, fit_latent) = collect_latent(env, agent, opts.fit_steps, opts.seed, opts.selection)?;
    let extraction = extract_latent_model(agent, &fit_latent, opts.selection)?;
    let consts = lipschitz_constants(&extraction.mc, p.gamma)?;
    let need = required_transitions(&p, &consts)?;
    let thin = opts.estimate.thin.max(1) as u64;
    let burn_in = opts.estimate.burn_in as u64;
    let steps = match opts.steps {
        Some(s) => s as u64,
        None => burn_in + thin * need,
    };
    if steps > opts.max_steps as u64 {
        let kept = (opts.max_steps as u64).saturating_sub(burn_in).div_ceil(thin);
        return Err(Error::InsufficientSamples { required: need, got: kept });
    }
    let steps = usize::try_from(steps).map_err(|_| Error::invalid("estimation trace too long"))?;
    let est_seed = opts.estimation_seed();
    let (est_trace, est_latent) = collect_latent(env, agent, steps, est_seed, opts.selection)?;
    let est = estimate_losses(&est_latent, &extraction.mdp, p, &opts.estimate)?;

    provenance.insert("env".into(), json!(env.config()));
    provenance.insert("fit_seed".into(), json!(opts.seed));
    provenance.insert("estimation_seed".into(), json!(est_seed));
    provenance.insert("fit_steps".into(), json!(opts.fit_steps));
    provenance.insert("fit_transitions_used".into(), json!(extraction.transitions_used));
    provenance.insert("estimation_steps".into(), json!(steps));
    provenance.insert("fit_trace_digest".into(), json!(fit_trace.digest()));
    provenance.insert("estimation_trace_digest".into(), json!(est_trace.digest()));
    provenance.insert("burn_in".into(), json!(opts.estimate.burn_in));
    provenance.insert("thin".into(), json!(opts.estimate.thin));
    provenance.insert("unsupported".into(), json!(opts.estimate.unsupported));
    provenance.insert("action_selection".into(), json!(opts.selection));
    provenance.insert("latent_states".into(), json!(extraction.mc.len()));

    let mut report = assemble_certificate(&est, &consts, provenance)?;
    if let Some(obj) = opts.objective {
        let obj = Objective { gamma: p.gamma, ..obj };
        let values = value_iteration(&extraction.mdp, &extraction.policy, &obj, VALUE_TOL)?;
        let initial_state = est_latent.steps[0].s;
        let latent_value = values.values.get(&initial_state).copied().ok_or_else(|| {
            Error::invalid(format!("initial latent state {initial_state:#x} is outside the extracted model"))
        })?;
        report.objective = Some(ObjectiveSummary { objective: obj, initial_state, latent_value });
    }
    Ok(Certification { report, extraction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{heuristic_policy, HeuristicPolicy};
    use crate::latent::{ChainEmbedding, LatentTransition, TabularAgent};

    fn step(s: u64, s_next: u64) -> LatentTransition {
        LatentTransition { s, a: 0, r: 0.0, s_next, reset: false }
    }

    #[test]
    fn closed_prefix_drops_unrevisited_tail() {
        let t = LatentTrace { n_ap: 0, steps: vec![step(1, 2), step(2, 1), step(1, 3)] };
        assert_eq!(closed_prefix(&t), 2);
        let t = LatentTrace { n_ap: 0, steps: vec![step(1, 2)] };
        assert_eq!(closed_prefix(&t), 0);
    }

    fn chain_agent(env: &Environment) -> (ChainEmbedding, LatentPolicy) {
        let phi = ChainEmbedding::new(env).unwrap();
        let HeuristicPolicy::Tabular { table } = heuristic_policy(env) else { unreachable!() };
        let policy = LatentPolicy {
            n_actions: table[0].len(),
            table: table.iter().enumerate().map(|(i, row)| (phi.latent_of_node(i), row.clone())).collect(),
        };
        (phi, policy)
    }

    /// Deterministic cycle: action 0 advances, action 1 stays.
    fn deterministic_chain() -> Environment {
        let mut spec = crate::env::LiftedChainSpec::oracle_default();
        let n = spec.n_nodes;
        let unit = |j: usize| (0..n).map(|k| if k == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        spec.transitions = vec![(0..n).map(|i| unit((i + 1) % n)).collect(), (0..n).map(unit).collect()];
        Environment::lifted_chain(spec).unwrap()
    }

    #[test]
    fn exact_abstraction_of_deterministic_chain_has_zero_losses() {
        let env = deterministic_chain();
        let (phi, policy) = chain_agent(&env);
        let agent = TabularAgent { phi: &phi, policy: &policy };
        let params = PacParams::new(0.05, 0.05, 0.5).unwrap();
        let mut opts = CertifyOptions::new(params, 3);
        opts.selection = ActionSelection::Sampled;
        opts.fit_steps = 50_000;
        opts.objective = Some(Objective::reach(1, 0.5));
        let cert = certify(&env, &agent, &opts, BTreeMap::new()).unwrap();
        let r = &cert.report;
        assert!(r.t >= r.required.loss.max(r.required.value));
        assert!(r.losses.lr.abs() < 1e-12 && r.losses.lp.abs() < 1e-12, "{:?}", r.losses);
        assert!(!r.bounds.vacuous);
        assert!(r.objective.as_ref().unwrap().latent_value.is_finite());
        assert_eq!(cert.extraction.mc.len(), env.chain_spec().unwrap().n_nodes);
    }

    #[test]
    fn too_short_a_budget_reports_required_transitions() {
        let env = Environment::from_id("lifted_chain").unwrap();
        let (phi, policy) = chain_agent(&env);
        let agent = TabularAgent { phi: &phi, policy: &policy };
        let mut opts = CertifyOptions::new(PacParams::new(0.01, 0.005, 0.5).unwrap(), 3);
        opts.selection = ActionSelection::Sampled;
        opts.fit_steps = 20_000;
        opts.max_steps = 5_000;
        match certify(&env, &agent, &opts, BTreeMap::new()) {
            Err(Error::InsufficientSamples { required, got }) => {
                assert!(required >= 33424);
                assert_eq!(got, 4_000);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
