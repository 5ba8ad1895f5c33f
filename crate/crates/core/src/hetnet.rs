//! Typed context network over feature nodes (X) and group nodes (H).
//!
//! Edges come in three kinds: X–X (`GG`), X–H (`PG`) and H–H (`PP`). The
//! encoder sees them merged into one undirected neighbor structure over the
//! node universe `0..d+m`, with X nodes first.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{randn, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeType {
    X,
    H,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeKind {
    /// X–X
    GG,
    /// X–H
    PG,
    /// H–H
    PP,
}

/// Subset of edge kinds passed to the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeMask {
    pub gg: bool,
    pub pg: bool,
    pub pp: bool,
}

impl EdgeMask {
    pub const ALL: EdgeMask = EdgeMask {
        gg: true,
        pg: true,
        pp: true,
    };
    pub const NONE: EdgeMask = EdgeMask {
        gg: false,
        pg: false,
        pp: false,
    };

    pub fn contains(self, kind: EdgeKind) -> bool {
        match kind {
            EdgeKind::GG => self.gg,
            EdgeKind::PG => self.pg,
            EdgeKind::PP => self.pp,
        }
    }

    pub fn is_subset_of(self, other: EdgeMask) -> bool {
        (!self.gg || other.gg) && (!self.pg || other.pg) && (!self.pp || other.pp)
    }
}

impl fmt::Display for EdgeMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.gg, "GG"), (self.pg, "PG"), (self.pp, "PP")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, s)| *s)
            .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl FromStr for EdgeMask {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") || s.is_empty() {
            return Ok(EdgeMask::NONE);
        }
        if s.eq_ignore_ascii_case("all") {
            return Ok(EdgeMask::ALL);
        }
        let mut mask = EdgeMask::NONE;
        for part in s.split('+') {
            match part.trim().to_ascii_uppercase().as_str() {
                "GG" => mask.gg = true,
                "PG" => mask.pg = true,
                "PP" => mask.pp = true,
                other => return Err(format!("unknown edge kind '{other}' (expected GG, PG, PP)")),
            }
        }
        Ok(mask)
    }
}

/// Ordered id list; the position of an id is its node index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(ids: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary id '{id}'")));
            }
        }
        Ok(Self { ids, index })
    }

    pub fn numbered(prefix: &str, n: usize) -> Self {
        Self::new((0..n).map(|i| format!("{prefix}{i}")).collect()).expect("ids are distinct")
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut ids = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let id = line.trim();
            if id.is_empty() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: "empty vocabulary entry".into(),
                });
            }
            ids.push(id.to_string());
        }
        Self::new(ids)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.ids.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UnknownIdPolicy {
    #[default]
    Reject,
    SkipWithCount,
}

/// Counters from edge-list ingestion.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub records: usize,
    pub duplicates: usize,
    pub skipped_unknown: usize,
    pub skipped_self_loops: usize,
}

/// Heterogeneous context network.
///
/// Typed edge lists are canonical: X–X and H–H pairs have the smaller index
/// first, X–H pairs are `(x, h)`, and each list is sorted and deduplicated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeteroGraph {
    d: usize,
    m: usize,
    edges_xx: Vec<(usize, usize)>,
    edges_xh: Vec<(usize, usize)>,
    edges_hh: Vec<(usize, usize)>,
}

impl HeteroGraph {
    pub fn new(
        d: usize,
        m: usize,
        xx: impl IntoIterator<Item = (usize, usize)>,
        xh: impl IntoIterator<Item = (usize, usize)>,
        hh: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let undirected = |edges: &mut dyn Iterator<Item = (usize, usize)>, n: usize, what: &str| {
            let mut set = BTreeSet::new();
            for (a, b) in edges {
                if a >= n || b >= n {
                    return Err(Error::Data(format!("{what} edge ({a}, {b}) out of range {n}")));
                }
                if a == b {
                    return Err(Error::Data(format!("{what} self-loop at node {a}")));
                }
                set.insert((a.min(b), a.max(b)));
            }
            Ok(set.into_iter().collect::<Vec<_>>())
        };
        let edges_xx = undirected(&mut xx.into_iter(), d, "X-X")?;
        let edges_hh = undirected(&mut hh.into_iter(), m, "H-H")?;
        let mut set = BTreeSet::new();
        for (x, h) in xh {
            if x >= d || h >= m {
                return Err(Error::Data(format!("X-H edge ({x}, {h}) out of range")));
            }
            set.insert((x, h));
        }
        Ok(Self {
            d,
            m,
            edges_xx,
            edges_xh: set.into_iter().collect(),
            edges_hh,
        })
    }

    pub fn empty(d: usize, m: usize) -> Self {
        Self {
            d,
            m,
            edges_xx: vec![],
            edges_xh: vec![],
            edges_hh: vec![],
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_nodes(&self) -> usize {
        self.d + self.m
    }

    pub fn edges_xx(&self) -> &[(usize, usize)] {
        &self.edges_xx
    }

    pub fn edges_xh(&self) -> &[(usize, usize)] {
        &self.edges_xh
    }

    pub fn edges_hh(&self) -> &[(usize, usize)] {
        &self.edges_hh
    }

    /// `(GG, PG, PP)` edge counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.edges_xx.len(), self.edges_xh.len(), self.edges_hh.len())
    }

    /// Union of the masked edge kinds as undirected, deduplicated, sorted
    /// neighbor lists over `0..d+m`.
    pub fn merge_untyped(&self, mask: EdgeMask) -> MergedGraph {
        let d = self.d;
        let mut sets = vec![BTreeSet::new(); self.n_nodes()];
        let mut link = |a: usize, b: usize| {
            sets[a].insert(b);
            sets[b].insert(a);
        };
        if mask.gg {
            self.edges_xx.iter().for_each(|&(a, b)| link(a, b));
        }
        if mask.pg {
            self.edges_xh.iter().for_each(|&(x, h)| link(x, d + h));
        }
        if mask.pp {
            self.edges_hh.iter().for_each(|&(a, b)| link(d + a, d + b));
        }
        MergedGraph {
            d,
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    pub fn merged_neighbors(&self) -> MergedGraph {
        self.merge_untyped(EdgeMask::ALL)
    }

    /// Writes the tab-separated edge-list format.
    pub fn write_edge_list(
        &self,
        w: &mut impl Write,
        x_vocab: &Vocabulary,
        h_vocab: &Vocabulary,
    ) -> std::io::Result<()> {
        writeln!(w, "# src_type\tsrc_id\tdst_type\tdst_id")?;
        for &(a, b) in &self.edges_xx {
            writeln!(w, "X\t{}\tX\t{}", x_vocab.ids[a], x_vocab.ids[b])?;
        }
        for &(x, h) in &self.edges_xh {
            writeln!(w, "X\t{}\tH\t{}", x_vocab.ids[x], h_vocab.ids[h])?;
        }
        for &(a, b) in &self.edges_hh {
            writeln!(w, "H\t{}\tH\t{}", h_vocab.ids[a], h_vocab.ids[b])?;
        }
        Ok(())
    }
}

/// Untyped undirected graph over `0..d+m`, X nodes first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergedGraph {
    d: usize,
    neighbors: Vec<Vec<usize>>,
}

impl MergedGraph {
    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(v, ns)| ns.iter().filter(move |&&u| u > v).map(move |&u| (v, u)))
    }
}

/// Reads edge records from one or more named streams.
pub fn load_edge_lists<R: BufRead>(
    sources: Vec<(String, R)>,
    x_vocab: &Vocabulary,
    h_vocab: &Vocabulary,
    policy: UnknownIdPolicy,
) -> Result<(HeteroGraph, LoadReport)> {
    let mut report = LoadReport::default();
    let (mut xx, mut xh, mut hh) = (BTreeSet::new(), BTreeSet::new(), BTreeSet::new());
    for (name, reader) in sources {
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(&name, e))?;
            let lineno = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').map(str::trim).collect();
            let parse_err = |msg: String| Error::Parse {
                path: name.clone(),
                line: lineno,
                msg,
            };
            if fields.len() != 4 {
                return Err(parse_err(format!("expected 4 tab-separated fields, found {}", fields.len())));
            }
            report.records += 1;
            let mut ends = [(NodeType::X, 0usize); 2];
            let mut unknown = false;
            for (slot, (ty, id)) in [(fields[0], fields[1]), (fields[2], fields[3])].into_iter().enumerate() {
                let (ty, vocab, kind) = match ty {
                    "X" => (NodeType::X, x_vocab, "X"),
                    "H" => (NodeType::H, h_vocab, "H"),
                    other => return Err(parse_err(format!("node type must be X or H, got '{other}'"))),
                };
                match vocab.get(id) {
                    Some(ix) => ends[slot] = (ty, ix),
                    None if policy == UnknownIdPolicy::Reject => {
                        return Err(Error::Vocabulary {
                            kind,
                            id: id.to_string(),
                            path: name.clone(),
                            line: lineno,
                        })
                    }
                    None => unknown = true,
                }
            }
            if unknown {
                report.skipped_unknown += 1;
                continue;
            }
            let inserted = match (ends[0], ends[1]) {
                ((NodeType::X, a), (NodeType::X, b)) | ((NodeType::H, a), (NodeType::H, b)) if a == b => {
                    if policy == UnknownIdPolicy::Reject {
                        return Err(parse_err("self-loop".into()));
                    }
                    report.skipped_self_loops += 1;
                    continue;
                }
                ((NodeType::X, a), (NodeType::X, b)) => xx.insert((a.min(b), a.max(b))),
                ((NodeType::H, a), (NodeType::H, b)) => hh.insert((a.min(b), a.max(b))),
                ((NodeType::X, x), (NodeType::H, h)) | ((NodeType::H, h), (NodeType::X, x)) => {
                    xh.insert((x, h))
                }
            };
            if !inserted {
                report.duplicates += 1;
            }
        }
    }
    let g = HeteroGraph::new(x_vocab.len(), h_vocab.len(), xx, xh, hh)?;
    Ok((g, report))
}

/// File-based wrapper around [`load_edge_lists`].
pub fn load_edge_files(
    paths: &[&Path],
    x_vocab: &Vocabulary,
    h_vocab: &Vocabulary,
    policy: UnknownIdPolicy,
) -> Result<(HeteroGraph, LoadReport)> {
    let mut sources = Vec::new();
    for p in paths {
        let f = std::fs::File::open(p).map_err(|e| Error::io(*p, e))?;
        sources.push((p.display().to_string(), std::io::BufReader::new(f)));
    }
    load_edge_lists(sources, x_vocab, h_vocab, policy)
}

/// Fixed standard-normal features for H nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct HFeatures {
    pub values: Tensor,
    pub seed: u64,
}

pub fn init_h_features(m: usize, f: usize, seed: u64) -> Result<HFeatures> {
    if m == 0 || f == 0 {
        return Err(Error::Parameter(format!("H feature matrix must be non-empty, got {m}x{f}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(HFeatures {
        values: randn(&mut rng, &[m, f]),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::io::Cursor;

    fn fixture() -> (Vocabulary, Vocabulary, String) {
        let xv = Vocabulary::numbered("x", 3);
        let hv = Vocabulary::numbered("h", 2);
        let text = "# desk fixture\nX\tx0\tX\tx1\nX\tx0\tH\th0\nH\th0\tH\th1\n".to_string();
        (xv, hv, text)
    }

    fn load_str(text: &str, xv: &Vocabulary, hv: &Vocabulary, policy: UnknownIdPolicy) -> Result<(HeteroGraph, LoadReport)> {
        load_edge_lists(vec![("mem".into(), Cursor::new(text.to_string()))], xv, hv, policy)
    }

    #[test]
    fn loads_desk_fixture() {
        let (xv, hv, text) = fixture();
        let (g, rep) = load_str(&text, &xv, &hv, UnknownIdPolicy::Reject).unwrap();
        assert_eq!(g.counts(), (1, 1, 1));
        assert_eq!(rep.records, 3);
    }

    #[test]
    fn duplicates_are_collapsed() {
        let (xv, hv, _) = fixture();
        let text = "X\tx0\tX\tx1\nX\tx1\tX\tx0\nX\tx0\tX\tx1\n";
        let (g, rep) = load_str(text, &xv, &hv, UnknownIdPolicy::Reject).unwrap();
        assert_eq!(g.counts(), (1, 0, 0));
        assert_eq!(rep.duplicates, 2);
    }

    #[test]
    fn malformed_record_reports_line() {
        let (xv, hv, _) = fixture();
        let err = load_str("# c\nX\tx0\tX\n", &xv, &hv, UnknownIdPolicy::Reject).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = load_str("Q\tx0\tX\tx1\n", &xv, &hv, UnknownIdPolicy::Reject).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn unknown_ids_reject_or_skip() {
        let (xv, hv, _) = fixture();
        let text = "X\tx0\tX\tx1\nX\tx9\tH\th0\n";
        let err = load_str(text, &xv, &hv, UnknownIdPolicy::Reject).unwrap_err();
        assert!(matches!(err, Error::Vocabulary { line: 2, .. }));
        let (g, rep) = load_str(text, &xv, &hv, UnknownIdPolicy::SkipWithCount).unwrap();
        assert_eq!(g.counts(), (1, 0, 0));
        assert_eq!(rep.skipped_unknown, 1);
    }

    #[test]
    fn merge_respects_mask() {
        let (xv, hv, text) = fixture();
        let (g, _) = load_str(&text, &xv, &hv, UnknownIdPolicy::Reject).unwrap();
        let gg = g.merge_untyped("GG".parse().unwrap());
        assert!(gg.neighbors(3).is_empty() && gg.neighbors(4).is_empty());
        let all = g.merge_untyped(EdgeMask::ALL);
        assert_eq!(all.neighbors(0), &[1, 3]);
        assert_eq!(all.neighbors(3), &[0, 4]);
        assert_eq!(all.edge_count(), 3);
    }

    #[test]
    fn edge_mask_parses_and_prints() {
        for s in ["GG", "GG+PG", "GG+PG+PP", "none", "PP"] {
            assert_eq!(s.parse::<EdgeMask>().unwrap().to_string(), s);
        }
        assert!("GX".parse::<EdgeMask>().is_err());
    }

    fn distinct_pairs(rng: &mut ChaCha8Rng, na: usize, nb: usize, count: usize, same: bool) -> Vec<(usize, usize)> {
        let mut set = BTreeSet::new();
        while set.len() < count {
            let (a, b) = (rng.random_range(0..na), rng.random_range(0..nb));
            if same {
                if a != b {
                    set.insert((a.min(b), a.max(b)));
                }
            } else {
                set.insert((a, b));
            }
        }
        set.into_iter().collect()
    }

    #[test]
    fn norman_shaped_counts() {
        let (d, m) = (5000, 2694);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xv = Vocabulary::numbered("g", d);
        let hv = Vocabulary::numbered("p", m);
        let g0 = HeteroGraph::new(
            d,
            m,
            distinct_pairs(&mut rng, d, d, 6191, true),
            distinct_pairs(&mut rng, d, m, 22786, false),
            distinct_pairs(&mut rng, m, m, 2713, true),
        )
        .unwrap();
        let mut buf = Vec::new();
        g0.write_edge_list(&mut buf, &xv, &hv).unwrap();
        let (g, _) = load_edge_lists(vec![("norman".into(), Cursor::new(buf))], &xv, &hv, UnknownIdPolicy::Reject).unwrap();
        assert_eq!(g.counts(), (6191, 22786, 2713));
        let merged = g.merged_neighbors();
        assert_eq!(merged.n_nodes(), 7694);
        assert_eq!(merged.edge_count(), 31690);
    }

    #[test]
    fn merged_graphs_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let (d, m) = (rng.random_range(2..15), rng.random_range(2..6));
            let (nxx, nxh, nhh) = (rng.random_range(0..d), rng.random_range(0..d), rng.random_range(0..m));
            let g = HeteroGraph::new(
                d,
                m,
                distinct_pairs(&mut rng, d, d, nxx, true),
                distinct_pairs(&mut rng, d, m, nxh, false),
                distinct_pairs(&mut rng, m, m, nhh, true),
            )
            .unwrap();
            let merged = g.merged_neighbors();
            for v in 0..merged.n_nodes() {
                for u in 0..merged.n_nodes() {
                    assert_eq!(merged.neighbors(v).contains(&u), merged.neighbors(u).contains(&v));
                }
                assert!(!merged.neighbors(v).contains(&v));
            }
        }
    }

    #[test]
    fn h_features_are_deterministic_and_standard_normal() {
        let a = init_h_features(7, 3, 9).unwrap();
        let b = init_h_features(7, 3, 9).unwrap();
        assert_eq!(a.values.data(), b.values.data());
        let one = init_h_features(1, 1, 4).unwrap();
        assert_eq!(one.values.len(), 1);
        assert!(init_h_features(0, 1, 0).is_err());

        let big = init_h_features(1000, 1000, 123).unwrap();
        let v = big.values.data();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.01 && (var - 1.0).abs() < 0.01, "{mean} {var}");
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        let v = Vocabulary::numbered("gene", 4);
        v.write(&p).unwrap();
        let back = Vocabulary::read(&p).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.get("gene2"), Some(2));
    }

    proptest! {
        #[test]
        fn merge_is_order_and_orientation_invariant(
            edges in prop::collection::vec((0usize..8, 0usize..8), 0..20),
            flip in prop::collection::vec(any::<bool>(), 20),
        ) {
            let edges: Vec<_> = edges.into_iter().filter(|(a, b)| a != b).collect();
            let g1 = HeteroGraph::new(8, 0, edges.clone(), vec![], vec![]).unwrap();
            let mut rev: Vec<_> = edges
                .iter()
                .zip(flip.iter().cycle())
                .map(|(&(a, b), &f)| if f { (b, a) } else { (a, b) })
                .collect();
            rev.reverse();
            let g2 = HeteroGraph::new(8, 0, rev, vec![], vec![]).unwrap();
            prop_assert_eq!(g1.merged_neighbors(), g2.merged_neighbors());
        }

        #[test]
        fn smaller_mask_gives_edge_subset(
            xx in prop::collection::vec((0usize..6, 0usize..6), 0..10),
            xh in prop::collection::vec((0usize..6, 0usize..3), 0..10),
            hh in prop::collection::vec((0usize..3, 0usize..3), 0..4),
            s in 0u8..8, t in 0u8..8,
        ) {
            let xx: Vec<_> = xx.into_iter().filter(|(a, b)| a != b).collect();
            let hh: Vec<_> = hh.into_iter().filter(|(a, b)| a != b).collect();
            let g = HeteroGraph::new(6, 3, xx, xh, hh).unwrap();
            let mk = |b: u8| EdgeMask { gg: b & 1 != 0, pg: b & 2 != 0, pp: b & 4 != 0 };
            let (small, big) = (mk(s & t), mk(s | t));
            prop_assert!(small.is_subset_of(big));
            let a: BTreeSet<_> = g.merge_untyped(small).edges().collect();
            let b: BTreeSet<_> = g.merge_untyped(big).edges().collect();
            prop_assert!(a.is_subset(&b));
        }
    }
}
