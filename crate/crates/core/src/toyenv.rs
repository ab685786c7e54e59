//! Environments: exactly enumerable token MDPs and a synthetic generation task.
//!
//! Both are deterministic-transition token trees. A state is `(prompt, prefix)`
//! and an action appends one token. Emitting the EOS token ends the episode;
//! reaching the horizon also ends it.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

/// Default cap on `vocab_size ^ max_horizon` for exact enumeration.
pub const DEFAULT_ENUMERATION_BUDGET: u64 = 1_000_000;

/// Anything a policy can roll out in.
pub trait Environment: Sync {
    fn vocab_size(&self) -> usize;
    /// Maximum number of generated tokens.
    fn max_len(&self) -> usize;
    fn eos_token(&self) -> Option<Token>;
    fn num_prompts(&self) -> usize;
    /// Binary reward of a finished response. `truncated` is set when the
    /// episode hit the length cap without emitting EOS.
    fn reward(&self, prompt: u32, tokens: &[Token], truncated: bool) -> u8;

    /// True when `prefix` already is a finished response.
    fn is_terminal(&self, prefix: &[Token]) -> bool {
        prefix.len() >= self.max_len() || matches!((self.eos_token(), prefix.last()), (Some(e), Some(&t)) if e == t)
    }
}

/// One row of an MDP reward table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardEntry {
    pub prompt: u32,
    pub tokens: Vec<Token>,
    pub reward: u8,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpSpecDoc {
    vocab_size: usize,
    max_horizon: usize,
    #[serde(default)]
    eos_token: Option<Token>,
    prompt_distribution: Vec<f64>,
    #[serde(default)]
    rewards: Vec<RewardEntry>,
    #[serde(default = "default_budget")]
    enumeration_budget: u64,
}

fn default_budget() -> u64 {
    DEFAULT_ENUMERATION_BUDGET
}

/// An exactly enumerable token MDP.
///
/// Sequences absent from the reward table have reward 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpSpecDoc", into = "MdpSpecDoc")]
pub struct MdpSpec {
    vocab_size: usize,
    max_horizon: usize,
    eos_token: Option<Token>,
    prompt_distribution: Vec<f64>,
    rewards: HashMap<(u32, Vec<Token>), u8>,
    enumeration_budget: u64,
}

impl TryFrom<MdpSpecDoc> for MdpSpec {
    type Error = Error;

    fn try_from(doc: MdpSpecDoc) -> Result<Self> {
        let mut spec = MdpSpec::new(doc.vocab_size, doc.max_horizon, doc.eos_token, doc.prompt_distribution)?
            .with_budget(doc.enumeration_budget);
        for e in doc.rewards {
            spec.set_reward(e.prompt, e.tokens, e.reward)?;
        }
        Ok(spec)
    }
}

impl From<MdpSpec> for MdpSpecDoc {
    fn from(spec: MdpSpec) -> Self {
        let mut rewards: Vec<RewardEntry> =
            spec.rewards.into_iter().map(|((prompt, tokens), reward)| RewardEntry { prompt, tokens, reward }).collect();
        rewards.sort_by(|a, b| (a.prompt, &a.tokens).cmp(&(b.prompt, &b.tokens)));
        MdpSpecDoc {
            vocab_size: spec.vocab_size,
            max_horizon: spec.max_horizon,
            eos_token: spec.eos_token,
            prompt_distribution: spec.prompt_distribution,
            rewards,
            enumeration_budget: spec.enumeration_budget,
        }
    }
}

impl MdpSpec {
    pub fn new(
        vocab_size: usize,
        max_horizon: usize,
        eos_token: Option<Token>,
        prompt_distribution: Vec<f64>,
    ) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        if max_horizon < 1 {
            return Err(Error::config("max_horizon must be at least 1"));
        }
        if let Some(e) = eos_token {
            if e as usize >= vocab_size {
                return Err(Error::config(format!("eos_token {e} outside vocabulary")));
            }
        }
        if prompt_distribution.is_empty() || prompt_distribution.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::config("prompt_distribution must be non-empty and nonnegative"));
        }
        let total: f64 = prompt_distribution.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("prompt_distribution sums to {total}, not 1")));
        }
        Ok(MdpSpec {
            vocab_size,
            max_horizon,
            eos_token,
            prompt_distribution,
            rewards: HashMap::new(),
            enumeration_budget: DEFAULT_ENUMERATION_BUDGET,
        })
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.enumeration_budget = budget;
        self
    }

    /// Sets the reward of a complete sequence. Only 0 and 1 are accepted.
    pub fn set_reward(&mut self, prompt: u32, tokens: Vec<Token>, reward: u8) -> Result<()> {
        if reward > 1 {
            return Err(Error::config(format!("reward must be 0 or 1, got {reward}")));
        }
        if prompt as usize >= self.prompt_distribution.len() {
            return Err(Error::config(format!("unknown prompt {prompt}")));
        }
        if tokens.iter().any(|&t| t as usize >= self.vocab_size) {
            return Err(Error::config("reward entry uses a token outside the vocabulary"));
        }
        if tokens.is_empty() || !self.is_complete(&tokens) {
            return Err(Error::config(format!("reward entry {tokens:?} is not a complete sequence")));
        }
        self.rewards.insert((prompt, tokens), reward);
        Ok(())
    }

    /// A random MDP: every complete sequence gets reward 1 with probability
    /// `p_one`. Prompts are uniform.
    pub fn random(
        vocab_size: usize,
        max_horizon: usize,
        eos_token: Option<Token>,
        num_prompts: usize,
        p_one: f64,
        seed: u64,
    ) -> Result<Self> {
        let dist = vec![1.0 / num_prompts as f64; num_prompts];
        let mut spec = MdpSpec::new(vocab_size, max_horizon, eos_token, dist)?;
        // Uniform 1/n may not sum to exactly 1; renormalise the last entry.
        let head: f64 = spec.prompt_distribution[..num_prompts - 1].iter().sum();
        spec.prompt_distribution[num_prompts - 1] = 1.0 - head;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in enumerate_trajectories(&spec)? {
            let r = u8::from(rng.gen::<f64>() < p_one);
            spec.rewards.insert((t.prompt, t.tokens), r);
        }
        Ok(spec)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_horizon(&self) -> usize {
        self.max_horizon
    }

    pub fn eos_token(&self) -> Option<Token> {
        self.eos_token
    }

    pub fn prompt_distribution(&self) -> &[f64] {
        &self.prompt_distribution
    }

    pub fn enumeration_budget(&self) -> u64 {
        self.enumeration_budget
    }

    fn is_complete(&self, tokens: &[Token]) -> bool {
        let ends_eos = matches!((self.eos_token, tokens.last()), (Some(e), Some(&t)) if e == t);
        let eos_inside = self.eos_token.is_some_and(|e| tokens[..tokens.len().saturating_sub(1)].contains(&e));
        !eos_inside && tokens.len() <= self.max_horizon && (ends_eos || tokens.len() == self.max_horizon)
    }

    /// Table lookup; absent sequences score 0.
    pub fn reward_of(&self, prompt: u32, tokens: &[Token]) -> u8 {
        // HashMap<(u32, Vec)> cannot be queried with a borrowed slice tuple.
        self.rewards.get(&(prompt, tokens.to_vec())).copied().unwrap_or(0)
    }

    /// `vocab_size ^ max_horizon`, saturating.
    pub fn tree_size(&self) -> u128 {
        (self.vocab_size as u128).saturating_pow(self.max_horizon as u32)
    }
}

impl Environment for MdpSpec {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_len(&self) -> usize {
        self.max_horizon
    }

    fn eos_token(&self) -> Option<Token> {
        self.eos_token
    }

    fn num_prompts(&self) -> usize {
        self.prompt_distribution.len()
    }

    fn reward(&self, prompt: u32, tokens: &[Token], _truncated: bool) -> u8 {
        self.reward_of(prompt, tokens)
    }
}

/// A complete sequence produced by [`enumerate_trajectories`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnumeratedTrajectory {
    pub prompt: u32,
    pub tokens: Vec<Token>,
    pub reward: u8,
}

/// Every complete sequence of every prompt, in prompt-major lexicographic
/// order.
pub fn enumerate_trajectories(spec: &MdpSpec) -> Result<Vec<EnumeratedTrajectory>> {
    let needed = spec.tree_size();
    if needed > spec.enumeration_budget as u128 {
        return Err(Error::BudgetExceeded { needed, budget: spec.enumeration_budget });
    }
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(spec.max_horizon);
    for prompt in 0..spec.prompt_distribution.len() as u32 {
        walk(spec, prompt, &mut prefix, &mut out);
    }
    Ok(out)
}

fn walk(spec: &MdpSpec, prompt: u32, prefix: &mut Vec<Token>, out: &mut Vec<EnumeratedTrajectory>) {
    for tok in 0..spec.vocab_size as Token {
        prefix.push(tok);
        if spec.is_terminal(prefix) {
            out.push(EnumeratedTrajectory { prompt, tokens: prefix.clone(), reward: spec.reward_of(prompt, prefix) });
        } else {
            walk(spec, prompt, prefix, out);
        }
        prefix.pop();
    }
}

/// Reward rule of the synthetic task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Predicate {
    /// At least `required_hits(prompt)` occurrences of the prompt's target token.
    Count,
    /// As `Count`, and additionally the number of hits is odd.
    Parity,
}

fn default_length_bias() -> f64 {
    0.5
}

/// Synthetic length-growing generation task.
///
/// Each prompt has a target token `1 + prompt % (V - 1)` (token 0 is EOS).
/// A response is correct when it ends with EOS before the cap and contains
/// enough target tokens; the required count grows with `length_bias`, so
/// longer responses are more likely to be correct until they hit the cap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub vocab_size: usize,
    pub max_response_length: usize,
    pub num_prompts: usize,
    #[serde(default = "default_predicate")]
    pub target_predicate: Predicate,
    #[serde(default = "default_length_bias")]
    pub length_bias: f64,
}

fn default_predicate() -> Predicate {
    Predicate::Count
}

impl SyntheticTask {
    pub const EOS: Token = 0;

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("synthetic task needs vocab_size >= 2"));
        }
        if self.max_response_length < 1 {
            return Err(Error::config("max_response_length must be at least 1"));
        }
        if self.num_prompts < 1 {
            return Err(Error::config("num_prompts must be at least 1"));
        }
        if !(self.length_bias.is_finite() && self.length_bias >= 0.0) {
            return Err(Error::config("length_bias must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn target_token(&self, prompt: u32) -> Token {
        1 + prompt % (self.vocab_size as u32 - 1)
    }

    /// `max(1, ceil(length_bias * (2 + prompt % 4)))`.
    pub fn required_hits(&self, prompt: u32) -> usize {
        let base = 2.0 + (prompt % 4) as f64;
        ((self.length_bias * base).ceil() as usize).max(1)
    }
}

impl Environment for SyntheticTask {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_len(&self) -> usize {
        self.max_response_length
    }

    fn eos_token(&self) -> Option<Token> {
        Some(Self::EOS)
    }

    fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    fn reward(&self, prompt: u32, tokens: &[Token], truncated: bool) -> u8 {
        if truncated || tokens.last() != Some(&Self::EOS) {
            return 0;
        }
        let target = self.target_token(prompt);
        let hits = tokens.iter().filter(|&&t| t == target).count();
        let ok = hits >= self.required_hits(prompt)
            && match self.target_predicate {
                Predicate::Count => true,
                Predicate::Parity => hits % 2 == 1,
            };
        u8::from(ok)
    }
}

/// Either environment, for configs that select one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvSpec {
    Mdp(MdpSpec),
    Synthetic(SyntheticTask),
}

impl EnvSpec {
    pub fn as_env(&self) -> &dyn Environment {
        match self {
            EnvSpec::Mdp(m) => m,
            EnvSpec::Synthetic(s) => s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EnvSpec::Mdp(_) => Ok(()),
            EnvSpec::Synthetic(s) => s.validate(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Counts complete sequences by walking the tree independently of
    /// `enumerate_trajectories`.
    fn recursive_count(v: u64, t: u64, eos: bool) -> u64 {
        if t == 0 {
            return 1;
        }
        if t == 1 {
            return v;
        }
        let continuing = if eos { v - 1 } else { v };
        let stopping = v - continuing;
        stopping + continuing * recursive_count(v, t - 1, eos)
    }

    fn spec(v: usize, t: usize, eos: Option<Token>) -> MdpSpec {
        MdpSpec::new(v, t, eos, vec![1.0]).unwrap()
    }

    #[test]
    fn base_case_two_tokens_one_step() {
        assert_eq!(enumerate_trajectories(&spec(2, 1, Some(0))).unwrap().len(), 2);
        assert_eq!(enumerate_trajectories(&spec(2, 1, None)).unwrap().len(), 2);
    }

    #[test]
    fn early_eos_count_matches_recursive_oracle() {
        let got = enumerate_trajectories(&spec(3, 2, Some(0))).unwrap();
        assert_eq!(got.len() as u64, recursive_count(3, 2, true));
        assert_eq!(got.len(), 7);
        for v in 2..=3 {
            for t in 1..=6 {
                let n = enumerate_trajectories(&spec(v, t, Some(0))).unwrap().len() as u64;
                assert_eq!(n, recursive_count(v as u64, t as u64, true), "V={v} T={t}");
            }
        }
    }

    #[test]
    fn no_eos_is_full_tree() {
        assert_eq!(enumerate_trajectories(&spec(2, 3, None)).unwrap().len(), 8);
    }

    #[test]
    fn each_sequence_once() {
        let got = enumerate_trajectories(&spec(3, 4, Some(1))).unwrap();
        let mut seen = std::collections::HashSet::new();
        for t in &got {
            assert!(seen.insert(t.tokens.clone()));
        }
    }

    #[test]
    fn budget_is_enforced() {
        let s = spec(3, 6, None).with_budget(100);
        assert!(matches!(enumerate_trajectories(&s), Err(Error::BudgetExceeded { needed: 729, .. })));
    }

    #[test]
    fn reward_table_lookup_and_default() {
        let mut s = spec(2, 2, Some(0));
        s.set_reward(0, vec![1, 0], 1).unwrap();
        assert_eq!(s.reward_of(0, &[1, 0]), 1);
        assert_eq!(s.reward_of(0, &[1, 1]), 0);
        assert!(s.set_reward(0, vec![1, 1], 2).is_err());
        assert!(s.set_reward(0, vec![1], 1).is_err(), "incomplete sequence");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(MdpSpec::new(1, 2, None, vec![1.0]).is_err());
        assert!(MdpSpec::new(2, 0, None, vec![1.0]).is_err());
        assert!(MdpSpec::new(2, 2, None, vec![0.5, 0.4]).is_err());
        assert!(MdpSpec::new(2, 2, Some(2), vec![1.0]).is_err());
    }

    #[test]
    fn mdp_json_round_trip() {
        let s = MdpSpec::random(3, 3, Some(0), 2, 0.5, 11).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: MdpSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn invalid_json_reward_rejected() {
        let doc = r#"{"vocab_size":2,"max_horizon":1,"prompt_distribution":[1.0],
                      "rewards":[{"prompt":0,"tokens":[1],"reward":3}]}"#;
        assert!(serde_json::from_str::<MdpSpec>(doc).is_err());
    }

    fn task(pred: Predicate) -> SyntheticTask {
        SyntheticTask {
            vocab_size: 4,
            max_response_length: 16,
            num_prompts: 8,
            target_predicate: pred,
            length_bias: 0.5,
        }
    }

    /// Re-states the predicate from scratch for the hand-built cases below.
    fn independent_predicate(pred: Predicate, prompt: u32, tokens: &[Token], truncated: bool) -> u8 {
        let target = 1 + prompt % 3;
        let need = match prompt % 4 {
            0 => 1, // ceil(0.5 * 2)
            1 => 2, // ceil(1.5)
            2 => 2,
            _ => 3, // ceil(2.5)
        };
        let ends = tokens.last() == Some(&0);
        let hits = tokens.iter().filter(|&&t| t == target).count();
        let parity_ok = pred == Predicate::Count || hits % 2 == 1;
        u8::from(!truncated && ends && hits >= need && parity_ok)
    }

    #[test]
    fn synthetic_predicates_match_independent_rule() {
        let cases: &[(u32, &[Token], bool)] = &[
            (0, &[1, 0], false),
            (0, &[2, 0], false),
            (1, &[2, 2, 0], false),
            (1, &[2, 3, 2, 2, 0], false),
            (3, &[1, 1, 0], false),
            (3, &[1, 1, 1, 0], false),
            (3, &[1, 1, 1, 1], true),
            (5, &[3, 3, 3, 3, 0], false),
            (6, &[1, 2, 3, 3, 1], false),
        ];
        for pred in [Predicate::Count, Predicate::Parity] {
            let t = task(pred);
            for &(p, toks, trunc) in cases {
                assert_eq!(
                    t.reward(p, toks, trunc),
                    independent_predicate(pred, p, toks, trunc),
                    "{pred:?} prompt {p} {toks:?}"
                );
            }
        }
    }

    #[test]
    fn synthetic_reward_is_deterministic() {
        let t = task(Predicate::Parity);
        let seq = [3, 3, 1, 3, 0];
        let first = t.reward(2, &seq, false);
        for _ in 0..10 {
            assert_eq!(t.reward(2, &seq, false), first);
        }
    }

    #[test]
    fn env_spec_json_tagged() {
        let e = EnvSpec::Synthetic(task(Predicate::Count));
        let s = serde_json::to_string(&e).unwrap();
        assert!(s.contains("\"kind\":\"synthetic\""));
        let back: EnvSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, e);
    }
}
