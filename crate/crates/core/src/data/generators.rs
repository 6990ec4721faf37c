//! Synthetic benchmark generators with certified oracles.
//!
//! Every generator runs a reject-and-resample loop: it measures its oracle
//! (k-NN accuracy, retrieval hit rate, label balance) on the freshly
//! generated data and regenerates from a derived seed until the floor holds,
//! recording the measured numbers and retry count in the manifest. Downstream
//! accuracy thresholds point at these manifest values.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::EmbedSpec;
use crate::retrieval::{ExemplarStore, RetrievalMode};

use super::{DataError, DatasetKind, Exemplar, GeneratedDataset, Manifest, Result, MANIFEST_FORMAT};

/// Alphabet for the molecule-like string tasks.
pub const CLUSTER_ALPHABET: &str = "CNOSPFclnos()=#123456789";

const SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

fn attempt_rng(seed: u64, attempt: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (attempt as u64).wrapping_mul(SEED_STRIDE))
}

fn random_string(rng: &mut ChaCha8Rng, alphabet: &[char], len: usize) -> String {
    (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
}

/// Substitute each char independently with probability `rate`, always to a
/// different char. Length-preserving so n-gram positions stay aligned
/// within a cluster.
fn mutate_string(rng: &mut ChaCha8Rng, s: &str, alphabet: &[char], rate: f64) -> String {
    s.chars()
        .map(|c| {
            if rng.gen_bool(rate) {
                loop {
                    let n = alphabet[rng.gen_range(0..alphabet.len())];
                    if n != c {
                        return n;
                    }
                }
            } else {
                c
            }
        })
        .collect()
}

fn yes_pct(exemplars: &[Exemplar]) -> f64 {
    if exemplars.is_empty() {
        return 0.0;
    }
    let yes = exemplars.iter().filter(|e| e.answer == "Yes").count();
    100.0 * yes as f64 / exemplars.len() as f64
}

// ── cluster classification ──

#[derive(Clone, Debug)]
pub struct ClusterSpec {
    pub seed: u64,
    pub clusters: usize,
    pub edit_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub knn_k: usize,
    /// Oracle floor in percent; generation retries under this.
    pub oracle_floor_pct: f64,
    /// Train label balance must stay within 50 ± this.
    pub balance_tolerance_pct: f64,
    pub max_retries: u32,
    pub embed_spec: EmbedSpec,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            seed: 0,
            clusters: 40,
            edit_rate: 0.08,
            min_len: 20,
            max_len: 28,
            train_size: 1500,
            dev_size: 150,
            test_size: 100,
            knn_k: 5,
            oracle_floor_pct: 95.0,
            balance_tolerance_pct: 10.0,
            max_retries: 8,
            embed_spec: EmbedSpec::default(),
        }
    }
}

/// Binary labels over string clusters: each cluster has a fixed Yes/No label
/// and members are per-char mutations of the cluster center, so Tanimoto
/// neighbors share the label and retrieval genuinely informs the answer.
pub fn gen_cluster_classification(spec: &ClusterSpec) -> Result<GeneratedDataset> {
    if spec.clusters < 2 || spec.clusters % 2 != 0 {
        return Err(DataError::BadConfig(
            "cluster count must be even and at least 2 for balanced labels".into(),
        ));
    }
    if spec.knn_k == 0 || spec.knn_k % 2 == 0 {
        return Err(DataError::BadConfig("knn_k must be odd and positive".into()));
    }
    let alphabet: Vec<char> = CLUSTER_ALPHABET.chars().collect();
    let mut best_acc = 0.0f64;
    for attempt in 0..=spec.max_retries {
        let mut rng = attempt_rng(spec.seed, attempt);
        // Cluster centers with alternating labels.
        let centers: Vec<(String, &str)> = (0..spec.clusters)
            .map(|i| {
                let len = rng.gen_range(spec.min_len..=spec.max_len);
                let label = if i % 2 == 0 { "Yes" } else { "No" };
                (random_string(&mut rng, &alphabet, len), label)
            })
            .collect();
        let total = spec.train_size + spec.dev_size + spec.test_size;
        let mut items: Vec<(String, String)> = (0..total)
            .map(|_| {
                let (center, label) = &centers[rng.gen_range(0..centers.len())];
                (
                    mutate_string(&mut rng, center, &alphabet, spec.edit_rate),
                    (*label).to_string(),
                )
            })
            .collect();
        items.shuffle(&mut rng);

        let make = |prefix: &str, slice: &[(String, String)]| -> Vec<Exemplar> {
            slice
                .iter()
                .enumerate()
                .map(|(i, (q, a))| Exemplar {
                    id: format!("{prefix}-{i:04}"),
                    question: q.clone(),
                    answer: a.clone(),
                    doc: None,
                })
                .collect()
        };
        let train = make("train", &items[..spec.train_size]);
        let dev = make("dev", &items[spec.train_size..spec.train_size + spec.dev_size]);
        let test = make("test", &items[spec.train_size + spec.dev_size..]);

        let balance = yes_pct(&train);
        if (balance - 50.0).abs() > spec.balance_tolerance_pct {
            continue;
        }
        let acc = knn_oracle_accuracy(&train, &test, spec.knn_k, spec.embed_spec)?;
        best_acc = best_acc.max(acc);
        if acc < spec.oracle_floor_pct {
            continue;
        }
        return Ok(GeneratedDataset {
            manifest: Manifest {
                format: MANIFEST_FORMAT,
                kind: DatasetKind::ClusterClassification,
                seed: spec.seed,
                train_size: train.len(),
                dev_size: dev.len(),
                test_size: test.len(),
                label_balance_pct: (balance * 10.0).round() / 10.0,
                knn_oracle_acc: Some(acc),
                retrieval_top1_hit_rate: None,
                matching_oracle_acc: None,
                zero_shot_bayes_pct: None,
                probe_strength: None,
                retries_used: attempt,
                embed_spec: spec.embed_spec,
            },
            train,
            dev,
            test,
        });
    }
    Err(DataError::OracleTooWeak {
        what: format!("{}-NN Tanimoto oracle", spec.knn_k),
        retries: spec.max_retries,
        got: best_acc,
        need: spec.oracle_floor_pct,
    })
}

/// k-NN majority vote over Tanimoto question similarity, train → test.
pub fn knn_oracle_accuracy(
    train: &[Exemplar],
    test: &[Exemplar],
    k: usize,
    embed_spec: EmbedSpec,
) -> Result<f64> {
    let store = ExemplarStore::build(train, RetrievalMode::Tanimoto, embed_spec)
        .map_err(|e| DataError::Retrieval(e.to_string()))?;
    let mut correct = 0usize;
    for item in test {
        let got = store
            .top_k(&item.question, k, None)
            .map_err(|e| DataError::Retrieval(e.to_string()))?;
        let neighbors = store
            .resolve(&got.ids)
            .map_err(|e| DataError::Retrieval(e.to_string()))?;
        let yes = neighbors.iter().filter(|n| n.answer == "Yes").count();
        let vote = if yes * 2 > neighbors.len() { "Yes" } else { "No" };
        if vote == item.answer {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / test.len().max(1) as f64)
}

// ── doc-grounded QA ──

#[derive(Clone, Debug)]
pub struct DocQaSpec {
    pub seed: u64,
    pub entities: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub hit_floor_pct: f64,
    pub balance_tolerance_pct: f64,
    pub max_retries: u32,
    pub embed_spec: EmbedSpec,
}

impl Default for DocQaSpec {
    fn default() -> Self {
        DocQaSpec {
            seed: 0,
            entities: 64,
            train_size: 900,
            dev_size: 90,
            test_size: 100,
            hit_floor_pct: 90.0,
            balance_tolerance_pct: 10.0,
            max_retries: 8,
            // Entity/property signal needs more hash buckets than the
            // molecule-string task: every question shares the template
            // scaffolding, and bucket-collision noise must stay below the
            // fact-level cosine margin.
            embed_spec: EmbedSpec {
                dim: 256,
                ..EmbedSpec::default()
            },
        }
    }
}

/// Property words picked for near-zero character overlap at matched offsets,
/// so two properties starting at the same question position share almost no
/// position-folded n-grams.
const PROPERTIES: [&str; 6] = [
    "buoyancy",
    "friction",
    "dampness",
    "porosity",
    "elasticity",
    "opacity",
];

/// Paraphrase templates that differ only in an equal-length lead word.
/// Entity and property then sit at identical positions in every phrasing, so
/// paraphrases of one fact disagree on just four leading characters while
/// questions about different facts disagree on a full entity or property.
const QA_TEMPLATES: [&str; 4] = [
    "Does {e} show {p}?",
    "Will {e} show {p}?",
    "Must {e} show {p}?",
    "Need {e} show {p}?",
];

fn qa_question(template: &str, entity: &str, property: &str) -> String {
    template.replace("{e}", entity).replace("{p}", property)
}

/// Facts are (entity, property) → uniformly random Yes/No, so the answer is
/// not inferable from the question alone (zero-shot Bayes accuracy 50%).
/// Each fact gets several paraphrased questions; one paraphrase of every
/// fact is pinned to train so retrieval can always surface the answer.
pub fn gen_doc_qa(spec: &DocQaSpec) -> Result<GeneratedDataset> {
    let facts_count = spec.entities * PROPERTIES.len();
    if spec.train_size < facts_count {
        return Err(DataError::BadConfig(format!(
            "train size {} cannot cover {} facts; raise train or lower entities",
            spec.train_size, facts_count
        )));
    }
    let total = spec.train_size + spec.dev_size + spec.test_size;
    let paraphrases = QA_TEMPLATES.len();
    if total > facts_count * paraphrases {
        return Err(DataError::BadConfig(format!(
            "requested {total} items but only {} fact-paraphrase pairs exist",
            facts_count * paraphrases
        )));
    }
    let letters: Vec<char> = ('A'..='Z').collect();
    let mut best_hit = 0.0f64;
    for attempt in 0..=spec.max_retries {
        let mut rng = attempt_rng(spec.seed, attempt);
        // Unique 10-char entity names; length is fixed so entity n-grams sit
        // at the same folded positions in every question.
        let mut entities: Vec<String> = Vec::with_capacity(spec.entities);
        while entities.len() < spec.entities {
            let name = format!(
                "{}{}{}-{}{}{}-{}{}",
                letters[rng.gen_range(0..26)],
                letters[rng.gen_range(0..26)],
                letters[rng.gen_range(0..26)],
                rng.gen_range(0..10),
                rng.gen_range(0..10),
                rng.gen_range(0..10),
                letters[rng.gen_range(0..26)],
                letters[rng.gen_range(0..26)]
            );
            if !entities.contains(&name) {
                entities.push(name);
            }
        }
        // fact index f = entity * |P| + property; value is the answer.
        let values: Vec<bool> = (0..facts_count).map(|_| rng.gen_bool(0.5)).collect();
        let fact_parts = |f: usize| {
            let entity = &entities[f / PROPERTIES.len()];
            let property = PROPERTIES[f % PROPERTIES.len()];
            (entity, property)
        };
        let answer_of = |f: usize| if values[f] { "Yes" } else { "No" };
        let doc_of = |f: usize| {
            let (e, p) = fact_parts(f);
            format!("Record: {e} {p} = {}.", answer_of(f))
        };

        // One pinned paraphrase per fact goes to train; the rest form a pool.
        let mut pinned: Vec<(usize, usize)> = (0..facts_count).map(|f| (f, 0)).collect();
        pinned.shuffle(&mut rng);
        let mut pool: Vec<(usize, usize)> = (0..facts_count)
            .flat_map(|f| (1..paraphrases).map(move |t| (f, t)))
            .collect();
        pool.shuffle(&mut rng);

        let fill = spec.train_size - facts_count;
        let mut train_items = pinned;
        train_items.extend(pool.drain(..fill));
        let dev_items: Vec<(usize, usize)> = pool.drain(..spec.dev_size).collect();
        let test_items: Vec<(usize, usize)> = pool.drain(..spec.test_size).collect();

        let make = |prefix: &str, items: &[(usize, usize)]| -> Vec<Exemplar> {
            items
                .iter()
                .enumerate()
                .map(|(i, &(f, t))| {
                    let (e, p) = fact_parts(f);
                    Exemplar {
                        id: format!("{prefix}-{i:04}"),
                        question: qa_question(QA_TEMPLATES[t], e, p),
                        answer: answer_of(f).to_string(),
                        doc: Some(doc_of(f)),
                    }
                })
                .collect()
        };
        let train = make("train", &train_items);
        let dev = make("dev", &dev_items);
        let test = make("test", &test_items);

        let balance = yes_pct(&train);
        if (balance - 50.0).abs() > spec.balance_tolerance_pct {
            continue;
        }

        // Gold-doc string-matching oracle: read the value out of the record.
        let matching_acc = {
            let ok = test
                .iter()
                .filter(|ex| {
                    let doc = ex.doc.as_deref().unwrap_or("");
                    let parsed = if doc.contains("= Yes.") { "Yes" } else { "No" };
                    parsed == ex.answer
                })
                .count();
            100.0 * ok as f64 / test.len().max(1) as f64
        };

        // Top-1 cosine hit rate: does the best candidate share the fact?
        let store = ExemplarStore::build(&train, RetrievalMode::Cosine, spec.embed_spec)
            .map_err(|e| DataError::Retrieval(e.to_string()))?;
        let train_fact_of = |id: &str| -> usize {
            let idx: usize = id.rsplit('-').next().unwrap().parse().unwrap();
            train_items[idx].0
        };
        let mut hits = 0usize;
        for (i, ex) in test.iter().enumerate() {
            let got = store
                .top_k(&ex.question, 1, None)
                .map_err(|e| DataError::Retrieval(e.to_string()))?;
            if train_fact_of(&got.ids[0]) == test_items[i].0 {
                hits += 1;
            }
        }
        let hit_rate = 100.0 * hits as f64 / test.len().max(1) as f64;
        best_hit = best_hit.max(hit_rate);
        if hit_rate < spec.hit_floor_pct {
            continue;
        }

        return Ok(GeneratedDataset {
            manifest: Manifest {
                format: MANIFEST_FORMAT,
                kind: DatasetKind::DocQa,
                seed: spec.seed,
                train_size: train.len(),
                dev_size: dev.len(),
                test_size: test.len(),
                label_balance_pct: (balance * 10.0).round() / 10.0,
                knn_oracle_acc: None,
                retrieval_top1_hit_rate: Some(hit_rate),
                matching_oracle_acc: Some(matching_acc),
                zero_shot_bayes_pct: Some(50.0),
                probe_strength: None,
                retries_used: attempt,
                embed_spec: spec.embed_spec,
            },
            train,
            dev,
            test,
        });
    }
    Err(DataError::OracleTooWeak {
        what: "top-1 cosine retrieval hit rate".into(),
        retries: spec.max_retries,
        got: best_hit,
        need: spec.hit_floor_pct,
    })
}

// ── order-sensitive probe ──

#[derive(Clone, Debug)]
pub struct ProbeSpec {
    pub seed: u64,
    /// 1 = looser conflict (two-edit variants, 4–1), 2 = one-edit variants
    /// 3–2, 3 = exact duplicate questions 3–2.
    pub strength: u32,
    pub items: usize,
    pub k: usize,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec {
            seed: 0,
            strength: 3,
            items: 12,
            k: 5,
        }
    }
}

/// A small task whose retrieved context carries conflicting answers, so any
/// reader with positional preferences becomes order-sensitive. Each test
/// question's top-K contains majority/minority answers split as per
/// `strength`; truth is the majority answer.
pub fn gen_order_sensitive_probe(spec: &ProbeSpec) -> Result<GeneratedDataset> {
    if !(1..=3).contains(&spec.strength) {
        return Err(DataError::BadConfig("probe strength must be 1..=3".into()));
    }
    if spec.items < 2 || spec.k < 3 {
        return Err(DataError::BadConfig(
            "probe needs at least 2 items and k of at least 3".into(),
        ));
    }
    let alphabet: Vec<char> = CLUSTER_ALPHABET.chars().collect();
    let mut rng = attempt_rng(spec.seed, spec.strength);
    let (majority_count, edits) = match spec.strength {
        1 => (spec.k - 1, 2usize),
        2 => (spec.k.div_ceil(2), 1),
        _ => (spec.k.div_ceil(2), 0),
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for item in 0..spec.items {
        let base = random_string(&mut rng, &alphabet, 16);
        let majority = if item % 2 == 0 { "Yes" } else { "No" };
        let minority = if majority == "Yes" { "No" } else { "Yes" };
        for j in 0..spec.k {
            let answer = if j < majority_count { majority } else { minority };
            let question = if edits == 0 {
                base.clone()
            } else {
                let mut q = base.clone();
                for _ in 0..edits {
                    let pos = rng.gen_range(0..q.len());
                    let mut chars: Vec<char> = q.chars().collect();
                    loop {
                        let c = alphabet[rng.gen_range(0..alphabet.len())];
                        if c != chars[pos] {
                            chars[pos] = c;
                            break;
                        }
                    }
                    q = chars.into_iter().collect();
                }
                q
            };
            train.push(Exemplar {
                id: format!("probe-train-{item:02}-{j}"),
                question,
                answer: answer.to_string(),
                doc: None,
            });
        }
        test.push(Exemplar {
            id: format!("probe-test-{item:02}"),
            question: base,
            answer: majority.to_string(),
            doc: None,
        });
    }
    let balance = yes_pct(&train);
    Ok(GeneratedDataset {
        manifest: Manifest {
            format: MANIFEST_FORMAT,
            kind: DatasetKind::OrderProbe,
            seed: spec.seed,
            train_size: train.len(),
            dev_size: 0,
            test_size: test.len(),
            label_balance_pct: (balance * 10.0).round() / 10.0,
            knn_oracle_acc: None,
            retrieval_top1_hit_rate: None,
            matching_oracle_acc: None,
            zero_shot_bayes_pct: None,
            probe_strength: Some(spec.strength),
            retries_used: 0,
            embed_spec: EmbedSpec::default(),
        },
        train,
        dev: Vec::new(),
        test,
    })
}

// ── pretraining corpus ──

/// One pretraining document: optional in-context exemplars, a question, and
/// its answer, rendered by the LM exactly like task prompts.
#[derive(Clone, Debug)]
pub struct CorpusBlock {
    pub context: Vec<Exemplar>,
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusStyle {
    /// Molecule-like strings only.
    Cluster,
    /// Entity/property questions only.
    DocQa,
    /// Both, interleaved.
    Mixed,
}

#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub seed: u64,
    pub blocks: usize,
    pub style: CorpusStyle,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 0,
            blocks: 4000,
            style: CorpusStyle::Mixed,
        }
    }
}

/// Synthetic text the toy LM pretrains on. Three block shapes teach the
/// skills the task prompts rely on: bare Q→A format, copying the answer of
/// an exact in-context match, and answering from a near-match. Questions and
/// answers are random, so the corpus teaches format and in-context reading
/// without leaking any generated task's actual labels.
pub fn gen_pretrain_corpus(spec: &CorpusSpec) -> Vec<CorpusBlock> {
    let alphabet: Vec<char> = CLUSTER_ALPHABET.chars().collect();
    let letters: Vec<char> = ('A'..='Z').collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut blocks = Vec::with_capacity(spec.blocks);
    for b in 0..spec.blocks {
        let cluster_style = match spec.style {
            CorpusStyle::Cluster => true,
            CorpusStyle::DocQa => false,
            CorpusStyle::Mixed => b % 2 == 0,
        };
        let question_of = |rng: &mut ChaCha8Rng| -> String {
            if cluster_style {
                let len = rng.gen_range(14..=26);
                random_string(rng, &alphabet, len)
            } else {
                let entity = format!(
                    "{}{}{}-{}{}{}",
                    letters[rng.gen_range(0..26)],
                    letters[rng.gen_range(0..26)],
                    letters[rng.gen_range(0..26)],
                    rng.gen_range(0..10),
                    rng.gen_range(0..10),
                    rng.gen_range(0..10)
                );
                let property = PROPERTIES[rng.gen_range(0..PROPERTIES.len())];
                qa_question(QA_TEMPLATES[rng.gen_range(0..QA_TEMPLATES.len())], &entity, property)
            }
        };
        let shape = b % 4;
        let block = match shape {
            // Bare format block: question, then answer.
            0 => CorpusBlock {
                context: Vec::new(),
                question: question_of(&mut rng),
                answer: if rng.gen_bool(0.5) { "Yes" } else { "No" }.to_string(),
            },
            // Copy block: the question repeats one context exemplar verbatim
            // and takes its answer.
            1 | 2 => {
                let c = rng.gen_range(2..=5usize);
                let context: Vec<Exemplar> = (0..c)
                    .map(|j| Exemplar {
                        id: format!("corpus-{b}-{j}"),
                        question: question_of(&mut rng),
                        answer: if rng.gen_bool(0.5) { "Yes" } else { "No" }.to_string(),
                        doc: None,
                    })
                    .collect();
                let pick = rng.gen_range(0..c);
                CorpusBlock {
                    question: context[pick].question.clone(),
                    answer: context[pick].answer.clone(),
                    context,
                }
            }
            // Near-match block: one edit away from a context exemplar.
            _ => {
                let c = rng.gen_range(2..=4usize);
                let context: Vec<Exemplar> = (0..c)
                    .map(|j| Exemplar {
                        id: format!("corpus-{b}-{j}"),
                        question: question_of(&mut rng),
                        answer: if rng.gen_bool(0.5) { "Yes" } else { "No" }.to_string(),
                        doc: None,
                    })
                    .collect();
                let pick = rng.gen_range(0..c);
                let question = if cluster_style {
                    mutate_string(&mut rng, &context[pick].question, &alphabet, 0.06)
                } else {
                    context[pick].question.clone()
                };
                CorpusBlock {
                    question,
                    answer: context[pick].answer.clone(),
                    context,
                }
            }
        };
        blocks.push(block);
    }
    blocks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cluster_spec() -> ClusterSpec {
        ClusterSpec {
            seed: 11,
            clusters: 10,
            train_size: 200,
            dev_size: 20,
            test_size: 40,
            ..ClusterSpec::default()
        }
    }

    #[test]
    fn cluster_dataset_meets_its_manifest_floors() {
        let ds = gen_cluster_classification(&small_cluster_spec()).unwrap();
        assert_eq!(ds.train.len(), 200);
        assert_eq!(ds.test.len(), 40);
        let m = &ds.manifest;
        assert!(m.knn_oracle_acc.unwrap() >= 95.0);
        assert!((m.label_balance_pct - 50.0).abs() <= 10.0);
        assert_eq!(m.kind, DatasetKind::ClusterClassification);
    }

    #[test]
    fn cluster_generation_is_deterministic() {
        let a = gen_cluster_classification(&small_cluster_spec()).unwrap();
        let b = gen_cluster_classification(&small_cluster_spec()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.manifest, b.manifest);
    }

    #[test]
    fn cluster_rejects_bad_config() {
        let mut spec = small_cluster_spec();
        spec.clusters = 7;
        assert!(matches!(
            gen_cluster_classification(&spec),
            Err(DataError::BadConfig(_))
        ));
    }

    fn small_qa_spec() -> DocQaSpec {
        DocQaSpec {
            seed: 5,
            entities: 16,
            train_size: 120,
            dev_size: 20,
            test_size: 40,
            ..DocQaSpec::default()
        }
    }

    #[test]
    fn qa_dataset_certifies_hit_rate_and_answers_match_docs() {
        let ds = gen_doc_qa(&small_qa_spec()).unwrap();
        let m = &ds.manifest;
        assert!(m.retrieval_top1_hit_rate.unwrap() >= 90.0);
        assert_eq!(m.matching_oracle_acc, Some(100.0));
        assert_eq!(m.zero_shot_bayes_pct, Some(50.0));
        for ex in ds.train.iter().chain(&ds.test) {
            let doc = ex.doc.as_deref().unwrap();
            assert!(doc.contains(&format!("= {}.", ex.answer)), "{doc} vs {}", ex.answer);
        }
    }

    #[test]
    fn qa_test_facts_are_always_covered_in_train() {
        let ds = gen_doc_qa(&small_qa_spec()).unwrap();
        // The fact is identified by the entity/property pair inside the doc.
        let fact_of = |ex: &Exemplar| {
            let doc = ex.doc.as_deref().unwrap();
            doc.split(" = ").next().unwrap().to_string()
        };
        let train_facts: std::collections::BTreeSet<String> =
            ds.train.iter().map(|e| fact_of(e)).collect();
        for ex in ds.test.iter().chain(&ds.dev) {
            assert!(train_facts.contains(&fact_of(ex)), "uncovered fact for {}", ex.id);
        }
    }

    #[test]
    fn qa_sizes_are_validated() {
        let mut spec = small_qa_spec();
        spec.train_size = 10; // fewer than facts
        assert!(matches!(gen_doc_qa(&spec), Err(DataError::BadConfig(_))));
    }

    #[test]
    fn probe_strength_three_duplicates_questions_with_conflict() {
        let ds = gen_order_sensitive_probe(&ProbeSpec::default()).unwrap();
        assert_eq!(ds.test.len(), 12);
        assert_eq!(ds.train.len(), 60);
        // Every test question appears verbatim k times in train with both answers.
        for t in &ds.test {
            let matching: Vec<&Exemplar> =
                ds.train.iter().filter(|e| e.question == t.question).collect();
            assert_eq!(matching.len(), 5);
            let yes = matching.iter().filter(|e| e.answer == "Yes").count();
            assert!(yes == 2 || yes == 3, "3-2 conflict expected, got {yes} yes");
            let majority = if yes == 3 { "Yes" } else { "No" };
            assert_eq!(t.answer, majority);
        }
    }

    #[test]
    fn probe_strength_one_uses_variants_not_duplicates() {
        let ds = gen_order_sensitive_probe(&ProbeSpec {
            strength: 1,
            ..ProbeSpec::default()
        })
        .unwrap();
        for t in &ds.test {
            let exact = ds.train.iter().filter(|e| e.question == t.question).count();
            assert_eq!(exact, 0, "strength 1 must mutate the stored questions");
        }
    }

    #[test]
    fn corpus_blocks_cover_all_shapes_and_are_deterministic() {
        let spec = CorpusSpec {
            seed: 3,
            blocks: 40,
            style: CorpusStyle::Mixed,
        };
        let a = gen_pretrain_corpus(&spec);
        let b = gen_pretrain_corpus(&spec);
        assert_eq!(a.len(), 40);
        assert!(a.iter().any(|blk| blk.context.is_empty()));
        assert!(a.iter().any(|blk| !blk.context.is_empty()));
        // Copy blocks answer with the matched exemplar's answer.
        for blk in &a {
            if let Some(hit) = blk.context.iter().find(|e| e.question == blk.question) {
                assert_eq!(blk.answer, hit.answer);
            }
        }
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.question, y.question);
            assert_eq!(x.answer, y.answer);
        }
    }
}
