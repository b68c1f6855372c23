use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, CANONICAL_RESIDUES, RESIDUES};
use super::DataError;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub protein: String,
    pub relation: String,
    pub attribute: String,
}

/// What to do with letters outside the residue alphabet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResiduePolicy {
    Reject,
    MapToX,
}

impl std::str::FromStr for ResiduePolicy {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reject" => Ok(Self::Reject),
            "map_to_x" | "map_to_X" => Ok(Self::MapToX),
            other => Err(DataError::Config(format!("unknown residue policy `{other}`"))),
        }
    }
}

/// Uppercases and trims a sequence; returns the offending letter when one
/// falls outside the alphabet and the policy is `Reject`.
pub fn normalize_sequence(raw: &str, policy: ResiduePolicy) -> Result<String, char> {
    let vocab = Vocabulary::new();
    let mut out = String::with_capacity(raw.len());
    for c in raw.trim().chars() {
        let up = c.to_ascii_uppercase();
        if vocab.residue_id(up).is_some() {
            out.push(up);
        } else {
            match policy {
                ResiduePolicy::Reject => return Err(c),
                ResiduePolicy::MapToX => out.push('X'),
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnowledgeGraph {
    triplets: Vec<Triplet>,
    index: HashMap<String, Vec<usize>>,
}

impl FromIterator<Triplet> for KnowledgeGraph {
    fn from_iter<I: IntoIterator<Item = Triplet>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

impl KnowledgeGraph {
    pub fn new(triplets: Vec<Triplet>) -> Self {
        let mut index: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, t) in triplets.iter().enumerate() {
            index.entry(t.protein.clone()).or_default().push(i);
        }
        Self { triplets, index }
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Positions of every triplet mentioning `protein`, in file order.
    pub fn positions(&self, protein: &str) -> &[usize] {
        self.index.get(protein).map_or(&[], Vec::as_slice)
    }

    pub fn proteins(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    /// Writes the graph in the three-column TSV format.
    pub fn write_tsv(&self, mut out: impl Write) -> std::io::Result<()> {
        for t in &self.triplets {
            writeln!(out, "{}\t{}\t{}", t.protein, t.relation, t.attribute)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let file = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_tsv(&mut w).map_err(|e| DataError::io(path, e))?;
        w.flush().map_err(|e| DataError::io(path, e))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    /// (1-based line number, reason)
    pub rejected: Vec<(usize, String)>,
    pub warnings: Vec<String>,
}

pub fn load_triplets(
    path: &Path,
    policy: ResiduePolicy,
) -> Result<(KnowledgeGraph, LoadReport), DataError> {
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    parse_triplets(file, policy)
}

pub fn parse_triplets(
    reader: impl Read,
    policy: ResiduePolicy,
) -> Result<(KnowledgeGraph, LoadReport), DataError> {
    let mut report = LoadReport::default();
    let mut triplets = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DataError::Parse {
            line: line_no,
            reason: e.to_string(),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(DataError::Parse {
                line: line_no,
                reason: format!("expected 3 tab-separated columns, found {}", cols.len()),
            });
        }
        let protein = match normalize_sequence(cols[0], policy) {
            Ok(p) if !p.is_empty() => p,
            Ok(_) => {
                report.rejected.push((line_no, "empty protein sequence".into()));
                continue;
            }
            Err(c) => {
                report
                    .rejected
                    .push((line_no, format!("invalid residue {c:?}")));
                continue;
            }
        };
        let (relation, attribute) = (cols[1].trim(), cols[2].trim());
        if relation.is_empty() || attribute.is_empty() {
            report
                .rejected
                .push((line_no, "empty relation or attribute text".into()));
            continue;
        }
        triplets.push(Triplet {
            protein,
            relation: relation.to_string(),
            attribute: attribute.to_string(),
        });
    }
    if triplets.is_empty() && report.rejected.is_empty() {
        report.warnings.push("triplet file is empty".into());
    }
    Ok((KnowledgeGraph::new(triplets), report))
}

/// One sequence per line, normalised the same way as triplet proteins.
pub fn load_holdout(path: &Path, policy: ResiduePolicy) -> Result<HashSet<String>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut set = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seq = normalize_sequence(line, policy).map_err(|c| DataError::Parse {
            line: i + 1,
            reason: format!("invalid residue {c:?} in holdout sequence"),
        })?;
        set.insert(seq);
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovalReport {
    pub removed_triplets: usize,
    pub retained_triplets: usize,
    pub retained_fraction: f64,
}

/// Drops every triplet whose protein appears in `holdout` (exact match).
pub fn filter_leakage(
    kg: &KnowledgeGraph,
    holdout: &HashSet<String>,
) -> (KnowledgeGraph, RemovalReport) {
    let kept: Vec<Triplet> = kg
        .triplets()
        .iter()
        .filter(|t| !holdout.contains(&t.protein))
        .cloned()
        .collect();
    let total = kg.len();
    let retained = kept.len();
    let report = RemovalReport {
        removed_triplets: total - retained,
        retained_triplets: retained,
        retained_fraction: if total == 0 {
            1.0
        } else {
            retained as f64 / total as f64
        },
    };
    (KnowledgeGraph::new(kept), report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthMode {
    /// Attribute text spells the protein, one residue per word.
    KnowledgeDependent,
    /// Attribute text spells an unrelated random sequence.
    Random,
}

impl std::str::FromStr for SynthMode {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "knowledge_dependent" => Ok(Self::KnowledgeDependent),
            "random" => Ok(Self::Random),
            other => Err(DataError::Config(format!("unknown synthetic mode `{other}`"))),
        }
    }
}

pub const SYNTH_RELATION: &str = "has residue sequence";

pub fn spell_sequence(seq: &str) -> String {
    let mut out = String::with_capacity(seq.len() * 2);
    for (i, c) in seq.chars().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push(c.to_ascii_lowercase());
    }
    out
}

pub fn random_sequence(rng: &mut impl Rng, len: usize) -> String {
    let alphabet = RESIDUES.as_bytes();
    (0..len)
        .map(|_| alphabet[rng.gen_range(0..CANONICAL_RESIDUES)] as char)
        .collect()
}

pub fn generate_synthetic_kg(
    n: usize,
    seq_len: usize,
    mode: SynthMode,
    seed: u64,
) -> Result<KnowledgeGraph, DataError> {
    if n == 0 || seq_len == 0 {
        return Err(DataError::Config(
            "synthetic graph needs n >= 1 and seq_len >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let triplets = (0..n)
        .map(|_| {
            let protein = random_sequence(&mut rng, seq_len);
            let attribute = match mode {
                SynthMode::KnowledgeDependent => spell_sequence(&protein),
                SynthMode::Random => spell_sequence(&random_sequence(&mut rng, seq_len)),
            };
            Triplet {
                protein,
                relation: SYNTH_RELATION.to_string(),
                attribute,
            }
        })
        .collect();
    Ok(KnowledgeGraph::new(triplets))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str, policy: ResiduePolicy) -> Result<(KnowledgeGraph, LoadReport), DataError> {
        parse_triplets(s.as_bytes(), policy)
    }

    #[test]
    fn parses_in_file_order() {
        let (kg, rep) = parse(
            "ACD\tgo term\tbinding\nMKV\tpart of\tmembrane\nMKV\tpart of\tnucleus\n",
            ResiduePolicy::Reject,
        )
        .unwrap();
        assert_eq!(kg.len(), 3);
        assert!(rep.rejected.is_empty());
        assert_eq!(kg.triplets()[0].protein, "ACD");
        assert_eq!(kg.triplets()[2].attribute, "nucleus");
    }

    #[test]
    fn invalid_residue_policies() {
        let src = "AC7D\trel\tattr\nACD\trel\tattr\n";
        let (kg, rep) = parse(src, ResiduePolicy::Reject).unwrap();
        assert_eq!(kg.len(), 1);
        assert_eq!(rep.rejected.len(), 1);
        assert_eq!(rep.rejected[0].0, 1);

        let (kg, rep) = parse(src, ResiduePolicy::MapToX).unwrap();
        assert_eq!(kg.len(), 2);
        assert!(rep.rejected.is_empty());
        assert_eq!(kg.triplets()[0].protein, "ACXD");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse("ACD\tr\ta\nACD\tonly-two\n", ResiduePolicy::Reject).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }));
    }

    #[test]
    fn empty_file_is_valid_with_warning() {
        let (kg, rep) = parse("", ResiduePolicy::Reject).unwrap();
        assert!(kg.is_empty());
        assert_eq!(rep.warnings.len(), 1);
    }

    #[test]
    fn lowercase_is_normalised() {
        let (kg, _) = parse("acd\tr\ta\n", ResiduePolicy::Reject).unwrap();
        assert_eq!(kg.triplets()[0].protein, "ACD");
    }

    #[test]
    fn index_matches_brute_force_scan() {
        let (kg, _) = parse(
            "AAA\tr\tx\nCCC\tr\ty\nAAA\tr\tz\nDDD\tr\tw\nAAA\tq\tv\n",
            ResiduePolicy::Reject,
        )
        .unwrap();
        for p in ["AAA", "CCC", "DDD", "EEE"] {
            let scan: Vec<usize> = kg
                .triplets()
                .iter()
                .enumerate()
                .filter(|(_, t)| t.protein == p)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(kg.positions(p), scan.as_slice());
        }
        assert_eq!(kg.positions("AAA"), &[0, 2, 4]);
    }

    fn five() -> KnowledgeGraph {
        ["AAA", "CCC", "DDD", "EEE", "FFF"]
            .iter()
            .map(|p| Triplet {
                protein: p.to_string(),
                relation: "r".into(),
                attribute: "a".into(),
            })
            .collect()
    }

    #[test]
    fn filter_identity_and_annihilation() {
        let kg = five();
        let (out, rep) = filter_leakage(&kg, &HashSet::new());
        assert_eq!(out, kg);
        assert_eq!(rep.retained_fraction, 1.0);

        let all: HashSet<String> = kg.proteins().map(String::from).collect();
        let (out, rep) = filter_leakage(&kg, &all);
        assert!(out.is_empty());
        assert_eq!(rep.retained_fraction, 0.0);
        assert_eq!(rep.removed_triplets, 5);
    }

    #[test]
    fn filter_partial_hit() {
        let kg = five();
        let holdout: HashSet<String> = ["CCC", "FFF"].iter().map(|s| s.to_string()).collect();
        let (out, rep) = filter_leakage(&kg, &holdout);
        assert_eq!(out.len(), 3);
        assert_eq!(rep.retained_triplets, 3);
        assert_eq!(rep.removed_triplets, 2);
        assert!((rep.retained_fraction - 0.6).abs() < 1e-12);
    }

    #[test]
    fn synthetic_spells_protein() {
        assert_eq!(spell_sequence("ACD"), "a c d");
        let kg = generate_synthetic_kg(3, 7, SynthMode::KnowledgeDependent, 1).unwrap();
        for t in kg.triplets() {
            assert_eq!(t.attribute, spell_sequence(&t.protein));
            assert_eq!(t.protein.len(), 7);
            assert_eq!(t.relation, SYNTH_RELATION);
        }
        let again = generate_synthetic_kg(3, 7, SynthMode::KnowledgeDependent, 1).unwrap();
        assert_eq!(kg, again);
        let random = generate_synthetic_kg(50, 10, SynthMode::Random, 1).unwrap();
        let matches = random
            .triplets()
            .iter()
            .filter(|t| t.attribute == spell_sequence(&t.protein))
            .count();
        assert_eq!(matches, 0);
    }

    #[test]
    fn synthetic_residue_frequencies_are_uniform() {
        let kg = generate_synthetic_kg(10_000, 50, SynthMode::KnowledgeDependent, 7).unwrap();
        let mut counts = HashMap::new();
        let mut total = 0usize;
        for t in kg.triplets() {
            for c in t.protein.chars() {
                *counts.entry(c).or_insert(0usize) += 1;
                total += 1;
            }
        }
        assert_eq!(counts.len(), 20);
        for (&c, &n) in &counts {
            let f = n as f64 / total as f64;
            assert!((f - 0.05).abs() < 0.01, "residue {c} frequency {f}");
        }
    }
}
