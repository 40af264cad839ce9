//! Reader for the PRISM explicit files written independently of the
//! library's importer.

use std::collections::BTreeMap;

use bisimcert::latent::LatentMdp;

pub fn ints(line: &str) -> Vec<usize> {
    line.split_whitespace().map(|t| t.parse().unwrap()).collect()
}

/// `.sta`: a `(bits)` header, then `index:(value)` per line.
pub fn parse_sta(text: &str) -> Vec<u64> {
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("(bits)"));
    lines
        .enumerate()
        .map(|(k, line)| {
            let (idx, rest) = line.split_once(':').unwrap();
            assert_eq!(idx.parse::<usize>().unwrap(), k);
            rest.strip_prefix('(').and_then(|r| r.strip_suffix(')')).unwrap().parse().unwrap()
        })
        .collect()
}

/// `.lab`: `id="name"` declarations, then `index: id id ...` lines.
pub fn parse_lab(text: &str) -> (BTreeMap<usize, String>, BTreeMap<usize, Vec<usize>>) {
    let mut lines = text.lines();
    let decls = lines
        .next()
        .unwrap()
        .split_whitespace()
        .map(|d| {
            let (id, name) = d.split_once('=').unwrap();
            (id.parse().unwrap(), name.trim_matches('"').to_string())
        })
        .collect();
    let assigned = lines
        .map(|line| {
            let (idx, ids) = line.split_once(':').unwrap();
            (idx.parse().unwrap(), ints(ids))
        })
        .collect();
    (decls, assigned)
}

/// Rebuilds the model JSON from the `.tra`, `.trew`, `.sta` and `.lab` files.
pub fn rebuild(files: &BTreeMap<String, String>, n_bits: usize, n_ap: usize) -> LatentMdp {
    let states = parse_sta(&files[".sta"]);
    let mut tra = files[".tra"].lines();
    let header = ints(tra.next().unwrap());
    assert_eq!(header[0], states.len());
    let mut transitions = Vec::new();
    let mut sums: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for line in tra {
        let tok: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(tok.len(), 5, "{line}");
        let (i, a, j): (usize, usize, usize) = (tok[0].parse().unwrap(), tok[1].parse().unwrap(), tok[2].parse().unwrap());
        let p: f64 = tok[3].parse().unwrap();
        assert_eq!(tok[4], format!("a{a}"));
        *sums.entry((i, a)).or_default() += p;
        transitions.push(serde_json::json!([states[i], a, states[j], p]));
    }
    assert_eq!(transitions.len(), header[2]);
    assert_eq!(sums.len(), header[1]);
    for (key, s) in &sums {
        assert!((s - 1.0).abs() <= 1e-12, "choice {key:?} sums to {s}");
    }
    let n_actions = sums.keys().map(|k| k.1).max().unwrap() + 1;

    let mut rewards: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut trew = files[".trew"].lines();
    assert_eq!(ints(trew.next().unwrap()), header);
    for line in trew {
        let tok: Vec<&str> = line.split_whitespace().collect();
        let key = (tok[0].parse().unwrap(), tok[1].parse().unwrap());
        let r: f64 = tok[3].parse().unwrap();
        if let Some(prev) = rewards.insert(key, r) {
            assert_eq!(prev, r, "reward varies within choice {key:?}");
        }
    }

    let (decls, assigned) = parse_lab(&files[".lab"]);
    assert_eq!(decls[&0], "init");
    assert_eq!(decls.len(), n_ap + 1);
    for (i, &s) in states.iter().enumerate() {
        let ids = assigned.get(&i).cloned().unwrap_or_default();
        let label: u64 = ids.iter().filter(|&&id| id > 0).map(|&id| 1u64 << (id - 1)).sum();
        assert_eq!(label, s & ((1 << n_ap) - 1), "label of state {i}");
    }
    assert_eq!(assigned.values().filter(|ids| ids.contains(&0)).count(), 1);

    let rewards: Vec<_> = rewards.iter().map(|(&(i, a), &r)| serde_json::json!([states[i], a, r])).collect();
    let doc = serde_json::json!({
        "n_bits": n_bits, "n_ap": n_ap, "n_actions": n_actions,
        "transitions": transitions, "rewards": rewards,
    });
    LatentMdp::from_json(&doc.to_string()).unwrap()
}

pub fn same_model(a: &LatentMdp, b: &LatentMdp) {
    assert_eq!(a.states(), b.states());
    assert_eq!(a.n_actions, b.n_actions);
    for ((key, ra), (_, rb)) in a.rows().zip(b.rows()) {
        assert_eq!(ra.next, rb.next, "row {key:?}");
        assert_eq!(ra.reward.to_bits(), rb.reward.to_bits(), "reward {key:?}");
    }
}
