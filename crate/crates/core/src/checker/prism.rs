//! PRISM explicit-format export and import.
//!
//! Files written for a prefix `p`:
//! - `p.tra`: `states choices transitions` header, then `src choice dst prob a<k>`.
//!   Every state carries one choice per latent action, so the choice index
//!   equals the action index.
//! - `p.trew`: state-action rewards, repeated on each transition of the choice.
//! - `p.lab`: `init` plus one label per atomic proposition.
//! - `p.sta`: state index to latent bit pattern.
//! - `p.meta.json`: model dimensions and smoothing.
//!
//! With a policy, the induced chain is written to `p_mc.tra`, `p_mc.lab` and
//! `p_mc.srew`. Numbers use shortest round-trip formatting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::LatentMc;
use crate::error::{Error, Result};
use crate::latent::{label_mask, LatentMdp, LatentPolicy, LatentRow, LatentState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrismMeta {
    pub n_bits: usize,
    pub n_ap: usize,
    pub n_actions: usize,
    pub n_states: usize,
    pub init: LatentState,
    #[serde(default)]
    pub smoothing: Option<String>,
    pub files: Vec<String>,
}

/// Text of every exported file, keyed by suffix (`.tra`, `_mc.lab`, ...).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrismFiles {
    pub files: BTreeMap<String, String>,
}

impl PrismFiles {
    pub fn write(&self, prefix: &Path) -> Result<Vec<PathBuf>> {
        if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut written = Vec::new();
        for (suffix, text) in &self.files {
            let path = with_suffix(prefix, suffix);
            fs::write(&path, text)?;
            written.push(path);
        }
        Ok(written)
    }
}

pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn label_header(n_ap: usize) -> String {
    let mut line = String::from("0=\"init\"");
    for i in 0..n_ap {
        write!(line, " {}=\"p{}\"", i + 1, i).unwrap();
    }
    line
}

fn label_line(out: &mut String, idx: usize, is_init: bool, label: u64, n_ap: usize) {
    let mut ids: Vec<usize> = Vec::new();
    if is_init {
        ids.push(0);
    }
    ids.extend((0..n_ap).filter(|&i| (label >> i) & 1 == 1).map(|i| i + 1));
    if !ids.is_empty() {
        write!(out, "{idx}:").unwrap();
        for id in ids {
            write!(out, " {id}").unwrap();
        }
        out.push('\n');
    }
}

/// Renders the model (and optionally the chain induced by `policy`). The
/// model must define every action in every instantiated state; use
/// [`LatentMdp::smoothed_add_one`] first otherwise. `init` defaults to the
/// smallest instantiated state.
pub fn render_prism(m: &LatentMdp, policy: Option<&LatentPolicy>, init: Option<LatentState>) -> Result<PrismFiles> {
    if let Some(&(state, action)) = m.missing_pairs().first() {
        return Err(Error::UnsupportedPair { state, action });
    }
    let states = m.states();
    if states.is_empty() {
        return Err(Error::invalid("cannot export an empty model"));
    }
    let init = init.unwrap_or(states[0]);
    let index: BTreeMap<LatentState, usize> = states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let init_idx = *index
        .get(&init)
        .ok_or_else(|| Error::invalid(format!("initial state {init:#x} not in the model")))?;
    let mask = label_mask(m.n_ap);

    let n_trans: usize = m.rows().map(|(_, r)| r.next.len()).sum();
    let n_choices = states.len() * m.n_actions;
    let mut tra = format!("{} {} {}\n", states.len(), n_choices, n_trans);
    let mut trew = format!("{} {} {}\n", states.len(), n_choices, n_trans);
    for (i, &s) in states.iter().enumerate() {
        for a in 0..m.n_actions {
            let row = m.row(s, a)?;
            for &(t, p) in &row.next {
                writeln!(tra, "{i} {a} {} {p} a{a}", index[&t]).unwrap();
                writeln!(trew, "{i} {a} {} {}", index[&t], row.reward).unwrap();
            }
        }
    }
    let mut lab = label_header(m.n_ap);
    lab.push('\n');
    let mut sta = String::from("(bits)\n");
    for (i, &s) in states.iter().enumerate() {
        label_line(&mut lab, i, i == init_idx, s & mask, m.n_ap);
        writeln!(sta, "{i}:({s})").unwrap();
    }

    let mut files = BTreeMap::new();
    files.insert(".tra".to_string(), tra);
    files.insert(".trew".to_string(), trew);
    files.insert(".lab".to_string(), lab);
    files.insert(".sta".to_string(), sta);

    if let Some(policy) = policy {
        let mc = LatentMc::induced(m, policy)?;
        let n_trans: usize = mc.rows.iter().map(|r| r.len()).sum();
        let mut tra = format!("{} {}\n", mc.len(), n_trans);
        for (i, row) in mc.rows.iter().enumerate() {
            for &(j, p) in row {
                writeln!(tra, "{i} {j} {p}").unwrap();
            }
        }
        let mc_init = mc.index_of(init);
        let mut lab = label_header(m.n_ap);
        lab.push('\n');
        for i in 0..mc.len() {
            label_line(&mut lab, i, Some(i) == mc_init, mc.labels[i], m.n_ap);
        }
        let nonzero: Vec<(usize, f64)> =
            mc.rewards.iter().copied().enumerate().filter(|&(_, r)| r != 0.0).collect();
        let mut srew = format!("{} {}\n", mc.len(), nonzero.len());
        for (i, r) in nonzero {
            writeln!(srew, "{i} {r}").unwrap();
        }
        let mut sta = String::from("(bits)\n");
        for (i, s) in mc.states.iter().enumerate() {
            writeln!(sta, "{i}:({s})").unwrap();
        }
        files.insert("_mc.tra".to_string(), tra);
        files.insert("_mc.lab".to_string(), lab);
        files.insert("_mc.srew".to_string(), srew);
        files.insert("_mc.sta".to_string(), sta);
    }

    let meta = PrismMeta {
        n_bits: m.n_bits,
        n_ap: m.n_ap,
        n_actions: m.n_actions,
        n_states: states.len(),
        init,
        smoothing: m.smoothing().map(str::to_string),
        files: files.keys().cloned().chain([".meta.json".to_string()]).collect(),
    };
    files.insert(".meta.json".to_string(), serde_json::to_string_pretty(&meta)? + "\n");
    Ok(PrismFiles { files })
}

pub fn export_prism(m: &LatentMdp, policy: Option<&LatentPolicy>, prefix: &Path) -> Result<Vec<PathBuf>> {
    render_prism(m, policy, None)?.write(prefix)
}

/// One line of an explicit MDP transition file.
#[derive(Clone, Debug, PartialEq)]
pub struct TraEntry {
    pub src: usize,
    pub choice: usize,
    pub dst: usize,
    pub value: f64,
    pub action: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraFile {
    pub n_states: usize,
    pub n_choices: usize,
    pub entries: Vec<TraEntry>,
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::Parse(format!("line {line}: `{tok}` is not a valid number")))
}

/// Parses an explicit MDP transition (or transition-reward) file and checks
/// its structure: header counts, index ranges, ordering by state and choice,
/// contiguous choice numbering, and, when `stochastic`, that each choice is
/// a probability distribution.
pub fn parse_tra(text: &str, stochastic: bool) -> Result<TraFile> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Parse("empty transition file".into()))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 3 {
        return Err(Error::Parse("header must read `states choices transitions`".into()));
    }
    let (n_states, n_choices, n_trans): (usize, usize, usize) =
        (parse_num(h[0], 1)?, parse_num(h[1], 1)?, parse_num(h[2], 1)?);
    let mut entries = Vec::with_capacity(n_trans);
    for (ln, line) in lines {
        let ln = ln + 1;
        let tok: Vec<&str> = line.split_whitespace().collect();
        if !(4..=5).contains(&tok.len()) {
            return Err(Error::Parse(format!("line {ln}: expected `src choice dst value [action]`")));
        }
        let e = TraEntry {
            src: parse_num(tok[0], ln)?,
            choice: parse_num(tok[1], ln)?,
            dst: parse_num(tok[2], ln)?,
            value: parse_num(tok[3], ln)?,
            action: tok.get(4).map(|s| s.to_string()),
        };
        if e.src >= n_states || e.dst >= n_states {
            return Err(Error::Parse(format!("line {ln}: state index out of range")));
        }
        if !e.value.is_finite() {
            return Err(Error::Parse(format!("line {ln}: non-finite value")));
        }
        if let Some(prev) = entries.last() {
            let prev: &TraEntry = prev;
            if (e.src, e.choice, e.dst) <= (prev.src, prev.choice, prev.dst) {
                return Err(Error::Parse(format!("line {ln}: entries not sorted")));
            }
            if e.src == prev.src && e.choice > prev.choice + 1 {
                return Err(Error::Parse(format!("line {ln}: choice numbering skips a value")));
            }
            if e.src == prev.src && e.choice == prev.choice && e.action != prev.action {
                return Err(Error::Parse(format!("line {ln}: action label changes within a choice")));
            }
        }
        if entries.last().is_none_or(|p: &TraEntry| p.src != e.src) && e.choice != 0 {
            return Err(Error::Parse(format!("line {ln}: first choice of a state must be 0")));
        }
        entries.push(e);
    }
    if entries.len() != n_trans {
        return Err(Error::Parse(format!("header declares {n_trans} transitions, found {}", entries.len())));
    }
    let mut sums: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for e in &entries {
        *sums.entry((e.src, e.choice)).or_insert(0.0) += e.value;
    }
    if sums.len() != n_choices {
        return Err(Error::Parse(format!("header declares {n_choices} choices, found {}", sums.len())));
    }
    if stochastic {
        if let Some(((s, c), p)) = sums.iter().find(|(_, &p)| (p - 1.0).abs() > 1e-9 || p < 0.0) {
            return Err(Error::Parse(format!("choice {c} of state {s} sums to {p}")));
        }
        if entries.iter().any(|e| e.value < 0.0 || e.value > 1.0) {
            return Err(Error::Parse("probabilities must lie in [0, 1]".into()));
        }
    }
    Ok(TraFile { n_states, n_choices, entries })
}

/// Parses a label file into label names and, per state, the label names it carries.
pub fn parse_lab(text: &str, n_states: usize) -> Result<(Vec<String>, BTreeMap<usize, Vec<String>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty label file".into()))?;
    let mut names: BTreeMap<usize, String> = BTreeMap::new();
    for tok in header.split_whitespace() {
        let (id, name) = tok
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("label declaration `{tok}` lacks `=`")))?;
        let id: usize = parse_num(id, 1)?;
        let name = name
            .strip_prefix('"')
            .and_then(|n| n.strip_suffix('"'))
            .ok_or_else(|| Error::Parse(format!("label name in `{tok}` must be quoted")))?;
        if names.insert(id, name.to_string()).is_some() {
            return Err(Error::Parse(format!("label id {id} declared twice")));
        }
    }
    if names.keys().copied().ne(0..names.len()) {
        return Err(Error::Parse("label ids must be 0, 1, 2, ...".into()));
    }
    let mut per_state: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    let mut last: Option<usize> = None;
    for line in lines {
        let (s, rest) = line
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("label line `{line}` lacks `:`")))?;
        let s: usize = parse_num(s.trim(), 0)?;
        if s >= n_states || last.is_some_and(|l| l >= s) {
            return Err(Error::Parse(format!("label line for state {s} out of range or order")));
        }
        last = Some(s);
        let ids = rest
            .split_whitespace()
            .map(|t| {
                let id: usize = parse_num(t, 0)?;
                names.get(&id).cloned().ok_or_else(|| Error::Parse(format!("undeclared label id {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        per_state.insert(s, ids);
    }
    if per_state.values().flatten().filter(|n| *n == "init").count() != 1 {
        return Err(Error::Parse("exactly one state must carry `init`".into()));
    }
    Ok((names.into_values().collect(), per_state))
}

pub fn parse_sta(text: &str) -> Result<Vec<LatentState>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    lines.next().ok_or_else(|| Error::Parse("empty state file".into()))?;
    let mut states = Vec::new();
    for (k, line) in lines.enumerate() {
        let (i, v) = line
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("state line `{line}` lacks `:`")))?;
        if parse_num::<usize>(i.trim(), k + 2)? != k {
            return Err(Error::Parse(format!("state line {} out of order", k + 2)));
        }
        let v = v
            .trim()
            .strip_prefix('(')
            .and_then(|v| v.strip_suffix(')'))
            .ok_or_else(|| Error::Parse(format!("state value in `{line}` must be parenthesised")))?;
        states.push(parse_num(v, k + 2)?);
    }
    Ok(states)
}

/// Rebuilds the latent MDP from exported files.
pub fn import_prism(prefix: &Path) -> Result<LatentMdp> {
    let read = |suffix: &str| fs::read_to_string(with_suffix(prefix, suffix));
    let meta: PrismMeta = serde_json::from_str(&read(".meta.json")?)?;
    let tra = parse_tra(&read(".tra")?, true)?;
    let trew = parse_tra(&read(".trew")?, false)?;
    let states = parse_sta(&read(".sta")?)?;
    parse_lab(&read(".lab")?, states.len())?;
    if states.len() != tra.n_states || states.len() != meta.n_states {
        return Err(Error::Parse("state counts disagree between files".into()));
    }
    if trew.entries.len() != tra.entries.len() {
        return Err(Error::Parse("reward file does not match the transition file".into()));
    }
    let mut rows: BTreeMap<(LatentState, usize), LatentRow> = BTreeMap::new();
    for (e, r) in tra.entries.iter().zip(&trew.entries) {
        if (e.src, e.choice, e.dst) != (r.src, r.choice, r.dst) {
            return Err(Error::Parse("reward file does not match the transition file".into()));
        }
        let row = rows
            .entry((states[e.src], e.choice))
            .or_insert_with(|| LatentRow { next: Vec::new(), reward: r.value, count: 0 });
        if row.reward != r.value {
            return Err(Error::Parse("state-action reward varies across successors".into()));
        }
        row.next.push((states[e.dst], e.value));
    }
    let mut m = LatentMdp::from_rows(meta.n_bits, meta.n_ap, meta.n_actions, rows)?;
    if let Some(s) = meta.smoothing {
        m = m.with_smoothing(s);
    }
    Ok(m)
}
