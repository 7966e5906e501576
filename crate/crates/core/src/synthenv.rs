//! Synthetic multi-hop QA environment.
//!
//! A corpus is a set of entity-chain documents plus distractors. Each gold
//! chain `c0 -> c1 -> ... -> ch` is stored as `h` documents: bridge documents
//! titled `c_i` pointing at `c_{i+1}`, and one answer document titled
//! `c_{h-1}` carrying the answer token `c_h`. Chains are entity-disjoint, so
//! every entity titles at most one gold document and exact retrieval always
//! surfaces it. Several QA instances may share one chain.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_RETRIEVER_K: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DocId(pub u32);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocRole {
    /// Intermediate evidence for the given instance.
    Bridge(u32),
    /// Evidence carrying the answer for the given instance.
    Answer(u32),
    Distractor,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub doc_id: DocId,
    pub title_entity: EntityId,
    pub linked_entity: Option<EntityId>,
    pub answer_token: Option<EntityId>,
    pub role: DocRole,
}

impl Document {
    /// Entities mentioned by the document.
    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        std::iter::once(self.title_entity)
            .chain(self.linked_entity)
            .chain(self.answer_token)
    }

    pub fn is_distractor(&self) -> bool {
        matches!(self.role, DocRole::Distractor)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QAInstance {
    pub instance_id: u32,
    pub start_entity: EntityId,
    pub hop_count: u32,
    pub gold_answer: EntityId,
    pub gold_bridge_docs: BTreeSet<DocId>,
    pub gold_answer_docs: BTreeSet<DocId>,
}

impl QAInstance {
    /// D*: bridge and answer documents together.
    pub fn gold_docs(&self) -> BTreeSet<DocId> {
        self.gold_bridge_docs
            .union(&self.gold_answer_docs)
            .copied()
            .collect()
    }

    pub fn gold_len(&self) -> usize {
        self.gold_bridge_docs.len() + self.gold_answer_docs.len()
    }

    pub fn is_gold(&self, doc: DocId) -> bool {
        self.gold_bridge_docs.contains(&doc) || self.gold_answer_docs.contains(&doc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusHeader {
    format_version: u32,
    entity_count: u32,
    retriever_k: usize,
    rng_seed: u64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Record {
    Document(Document),
    Instance(QAInstance),
}

/// Documents, QA instances, and the retrieval index over them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    documents: Vec<Document>,
    instances: Vec<QAInstance>,
    entity_count: u32,
    retriever_k: usize,
    rng_seed: u64,
    title_index: Vec<Vec<DocId>>,
    distractors: Vec<DocId>,
}

impl Corpus {
    /// Builds a corpus, validating document and instance invariants.
    pub fn new(
        documents: Vec<Document>,
        instances: Vec<QAInstance>,
        entity_count: u32,
        retriever_k: usize,
        rng_seed: u64,
    ) -> Result<Self> {
        if retriever_k == 0 {
            return Err(Error::Config("retriever_k must be >= 1".into()));
        }
        let mut title_index = vec![Vec::new(); entity_count as usize];
        let mut distractors = Vec::new();
        for (pos, doc) in documents.iter().enumerate() {
            if doc.doc_id.0 as usize != pos {
                return Err(Error::Config(format!(
                    "document ids must be contiguous from 0; found {} at position {pos}",
                    doc.doc_id
                )));
            }
            if doc.entities().any(|e| e.0 >= entity_count) {
                return Err(Error::Config(format!("{} references an unknown entity", doc.doc_id)));
            }
            match doc.role {
                DocRole::Answer(_) if doc.answer_token.is_none() => {
                    return Err(Error::Config(format!("answer {} lacks answer_token", doc.doc_id)))
                }
                DocRole::Bridge(_) if doc.linked_entity.is_none() => {
                    return Err(Error::Config(format!("bridge {} lacks linked_entity", doc.doc_id)))
                }
                DocRole::Distractor => distractors.push(doc.doc_id),
                _ => {}
            }
            title_index[doc.title_entity.0 as usize].push(doc.doc_id);
        }
        for (pos, inst) in instances.iter().enumerate() {
            if inst.instance_id as usize != pos {
                return Err(Error::Config(format!(
                    "instance ids must be contiguous from 0; found {} at position {pos}",
                    inst.instance_id
                )));
            }
            check_instance(inst, &documents)?;
        }
        Ok(Corpus {
            documents,
            instances,
            entity_count,
            retriever_k,
            rng_seed,
            title_index,
            distractors,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn document(&self, id: DocId) -> &Document {
        &self.documents[id.0 as usize]
    }

    pub fn instances(&self) -> &[QAInstance] {
        &self.instances
    }

    pub fn instance(&self, id: u32) -> Result<&QAInstance> {
        self.instances
            .get(id as usize)
            .ok_or(Error::UnknownInstance(id))
    }

    pub fn entity_count(&self) -> u32 {
        self.entity_count
    }

    pub fn retriever_k(&self) -> usize {
        self.retriever_k
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn distractor_count(&self) -> usize {
        self.distractors.len()
    }

    pub fn gold_doc_count(&self) -> usize {
        self.documents.len() - self.distractors.len()
    }

    /// Entity chain `[c0, ..., ch]` of an instance, recovered by following
    /// bridge links from the start entity to the answer document.
    pub fn chain(&self, inst: &QAInstance) -> Vec<EntityId> {
        let mut chain = vec![inst.start_entity];
        let mut current = inst.start_entity;
        loop {
            let next = inst
                .gold_bridge_docs
                .iter()
                .map(|&d| self.document(d))
                .find(|d| d.title_entity == current)
                .and_then(|d| d.linked_entity);
            match next {
                Some(e) if !chain.contains(&e) => {
                    chain.push(e);
                    current = e;
                }
                _ => break,
            }
        }
        chain.push(inst.gold_answer);
        chain
    }

    /// Gold edge set: (title, successor) pairs of every non-distractor doc.
    fn gold_edges(documents: &[Document]) -> HashSet<(EntityId, EntityId)> {
        documents
            .iter()
            .filter(|d| !d.is_distractor())
            .filter_map(|d| d.linked_entity.or(d.answer_token).map(|b| (d.title_entity, b)))
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = CorpusHeader {
            format_version: CORPUS_FORMAT_VERSION,
            entity_count: self.entity_count,
            retriever_k: self.retriever_k,
            rng_seed: self.rng_seed,
        };
        writeln!(out, "{}", serde_json::to_string(&header)?)?;
        for doc in &self.documents {
            writeln!(out, "{}", serde_json::to_string(doc)?)?;
        }
        for inst in &self.instances {
            writeln!(out, "{}", serde_json::to_string(inst)?)?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R, origin: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut lines = input.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| perr(1, "empty corpus file".into()))?;
        let first = first.map_err(|e| perr(1, e.to_string()))?;
        let header: CorpusHeader =
            serde_json::from_str(&first).map_err(|e| perr(1, format!("bad header: {e}")))?;
        if header.format_version != CORPUS_FORMAT_VERSION {
            return Err(perr(
                1,
                format!("unsupported format_version {}", header.format_version),
            ));
        }
        let mut documents = Vec::new();
        let mut instances = Vec::new();
        for (idx, line) in lines {
            let line = line.map_err(|e| perr(idx + 1, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Record>(&line) {
                Ok(Record::Document(d)) if instances.is_empty() => documents.push(d),
                Ok(Record::Document(_)) => {
                    return Err(perr(idx + 1, "document record after instance records".into()))
                }
                Ok(Record::Instance(i)) => instances.push(i),
                Err(e) => return Err(perr(idx + 1, e.to_string())),
            }
        }
        Corpus::new(
            documents,
            instances,
            header.entity_count,
            header.retriever_k,
            header.rng_seed,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Corpus::read_jsonl(std::io::BufReader::new(file), &path.display().to_string())
    }
}

fn check_instance(inst: &QAInstance, documents: &[Document]) -> Result<()> {
    let bad = |msg: &str| Err(Error::Config(format!("instance {}: {msg}", inst.instance_id)));
    if inst.hop_count == 0 {
        return bad("hop_count must be >= 1");
    }
    if inst.gold_bridge_docs.len() != inst.hop_count as usize - 1 {
        return bad("bridge document count must equal hop_count - 1");
    }
    if inst.gold_answer_docs.is_empty() {
        return bad("needs at least one answer document");
    }
    if !inst.gold_bridge_docs.is_disjoint(&inst.gold_answer_docs) {
        return bad("bridge and answer documents overlap");
    }
    let known = |d: &DocId| (d.0 as usize) < documents.len();
    if !inst.gold_bridge_docs.iter().all(known) || !inst.gold_answer_docs.iter().all(known) {
        return bad("references a missing document");
    }
    // Walk the bridge chain; it must reach every answer document's title.
    let mut current = inst.start_entity;
    let mut remaining: BTreeSet<DocId> = inst.gold_bridge_docs.clone();
    while let Some(&next_doc) = remaining
        .iter()
        .find(|d| documents[d.0 as usize].title_entity == current)
    {
        remaining.remove(&next_doc);
        match documents[next_doc.0 as usize].linked_entity {
            Some(e) => current = e,
            None => return bad("bridge document lacks linked_entity"),
        }
    }
    if !remaining.is_empty() {
        return bad("bridge documents do not form a chain from the start entity");
    }
    if inst
        .gold_answer_docs
        .iter()
        .any(|d| documents[d.0 as usize].title_entity != current)
    {
        return bad("answer document is not reachable along the bridge chain");
    }
    Ok(())
}

/// Parameters of [`generate_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub entity_count: u32,
    pub instance_count: usize,
    pub hop_distribution: BTreeMap<u32, f64>,
    pub distractor_ratio: f64,
    pub retriever_k: usize,
    pub seed: u64,
}

/// Parses `"2:0.5,3:0.5"` into a hop distribution.
pub fn parse_hop_distribution(text: &str) -> Result<BTreeMap<u32, f64>> {
    let mut out = BTreeMap::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (h, p) = part
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("hop entry `{part}` is not `hop:prob`")))?;
        let h: u32 = h
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad hop count `{h}`")))?;
        let p: f64 = p
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad probability `{p}`")))?;
        if out.insert(h, p).is_some() {
            return Err(Error::Config(format!("hop {h} listed twice")));
        }
    }
    Ok(out)
}

pub fn format_hop_distribution(dist: &BTreeMap<u32, f64>) -> String {
    dist.iter()
        .map(|(h, p)| format!("{h}:{p}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Generates a deterministic entity-chain corpus.
///
/// Chains are allocated per hop count in proportion to how many instances
/// request that hop count, each chain taking `h + 1` fresh entities. Every
/// chain serves at least one instance; leftover instances are assigned to
/// a uniformly random chain of their hop count. Distractors number
/// `floor(distractor_ratio * gold_docs)` and link two random distinct
/// entities that do not form a gold edge.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let n = spec.entity_count as usize;
    if spec.hop_distribution.is_empty() {
        return Err(Error::Config("hop distribution is empty".into()));
    }
    if spec.hop_distribution.keys().any(|&h| h == 0) {
        return Err(Error::Config("hop counts must be >= 1".into()));
    }
    if spec
        .hop_distribution
        .values()
        .any(|&p| !p.is_finite() || p < 0.0)
    {
        return Err(Error::Config("hop probabilities must be finite and >= 0".into()));
    }
    let mass: f64 = spec.hop_distribution.values().sum();
    if (mass - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("hop probabilities sum to {mass}, not 1")));
    }
    if !spec.distractor_ratio.is_finite() || spec.distractor_ratio < 0.0 {
        return Err(Error::Config("distractor_ratio must be >= 0".into()));
    }
    if spec.instance_count == 0 {
        return Err(Error::Config("instance_count must be >= 1".into()));
    }
    let max_hop = *spec.hop_distribution.keys().next_back().unwrap() as usize;
    if n < max_hop + 2 {
        return Err(Error::EntityPoolExhausted {
            needed: max_hop + 2,
            available: n,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let hops: Vec<u32> = (0..spec.instance_count)
        .map(|_| sample_hop(&spec.hop_distribution, &mut rng))
        .collect();
    let mut demand: BTreeMap<u32, usize> = BTreeMap::new();
    for &h in &hops {
        *demand.entry(h).or_default() += 1;
    }

    // Chain allocation per hop count.
    let mut chains_per_hop: BTreeMap<u32, usize> = demand
        .iter()
        .map(|(&h, &count)| {
            let share = count as f64 / spec.instance_count as f64;
            let fit = (n as f64 * share / (h as f64 + 1.0)).floor() as usize;
            (h, fit.clamp(1, count))
        })
        .collect();
    let needed = |c: &BTreeMap<u32, usize>| -> usize {
        c.iter().map(|(&h, &k)| k * (h as usize + 1)).sum()
    };
    while needed(&chains_per_hop) > n {
        let (&h, _) = chains_per_hop
            .iter()
            .filter(|(_, &k)| k > 1)
            .max_by_key(|(_, &k)| k)
            .ok_or(Error::EntityPoolExhausted {
                needed: needed(&chains_per_hop),
                available: n,
            })?;
        *chains_per_hop.get_mut(&h).unwrap() -= 1;
    }

    let mut pool: Vec<EntityId> = (0..spec.entity_count).map(EntityId).collect();
    pool.shuffle(&mut rng);
    let mut pool = pool.into_iter();
    let mut chains: Vec<Vec<EntityId>> = Vec::new();
    let mut chains_of_hop: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (&h, &k) in &chains_per_hop {
        for _ in 0..k {
            chains_of_hop.entry(h).or_default().push(chains.len());
            chains.push(pool.by_ref().take(h as usize + 1).collect());
        }
    }

    // Instance -> chain, first use of each chain in order.
    let mut next_unused: BTreeMap<u32, usize> = BTreeMap::new();
    let assignment: Vec<usize> = hops
        .iter()
        .map(|h| {
            let ids = &chains_of_hop[h];
            let used = next_unused.entry(*h).or_default();
            if *used < ids.len() {
                *used += 1;
                ids[*used - 1]
            } else {
                ids[rng.gen_range(0..ids.len())]
            }
        })
        .collect();
    let mut owner: Vec<Option<u32>> = vec![None; chains.len()];
    for (inst, &c) in assignment.iter().enumerate() {
        owner[c].get_or_insert(inst as u32);
    }

    // Gold documents, in chain order.
    let mut documents = Vec::new();
    let mut chain_docs: Vec<(BTreeSet<DocId>, BTreeSet<DocId>)> = Vec::new();
    for (c, chain) in chains.iter().enumerate() {
        let inst = owner[c].expect("every chain has an instance");
        let h = chain.len() - 1;
        let mut bridge = BTreeSet::new();
        let mut answer = BTreeSet::new();
        for i in 0..h {
            let doc_id = DocId(documents.len() as u32);
            let is_answer = i + 1 == h;
            documents.push(Document {
                doc_id,
                title_entity: chain[i],
                linked_entity: (!is_answer).then_some(chain[i + 1]),
                answer_token: is_answer.then_some(chain[h]),
                role: if is_answer {
                    DocRole::Answer(inst)
                } else {
                    DocRole::Bridge(inst)
                },
            });
            if is_answer {
                answer.insert(doc_id);
            } else {
                bridge.insert(doc_id);
            }
        }
        chain_docs.push((bridge, answer));
    }

    let gold_edges = Corpus::gold_edges(&documents);
    let distractor_count = (spec.distractor_ratio * documents.len() as f64).floor() as usize;
    for _ in 0..distractor_count {
        let (a, b) = loop {
            let a = EntityId(rng.gen_range(0..spec.entity_count));
            let b = EntityId(rng.gen_range(0..spec.entity_count));
            if a != b && !gold_edges.contains(&(a, b)) {
                break (a, b);
            }
        };
        documents.push(Document {
            doc_id: DocId(documents.len() as u32),
            title_entity: a,
            linked_entity: Some(b),
            answer_token: None,
            role: DocRole::Distractor,
        });
    }

    let instances = assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let chain = &chains[c];
            QAInstance {
                instance_id: i as u32,
                start_entity: chain[0],
                hop_count: (chain.len() - 1) as u32,
                gold_answer: *chain.last().unwrap(),
                gold_bridge_docs: chain_docs[c].0.clone(),
                gold_answer_docs: chain_docs[c].1.clone(),
            }
        })
        .collect();

    Corpus::new(
        documents,
        instances,
        spec.entity_count,
        spec.retriever_k,
        spec.seed,
    )
}

fn sample_hop(dist: &BTreeMap<u32, f64>, rng: &mut ChaCha8Rng) -> u32 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (&h, &p) in dist {
        acc += p;
        if u < acc {
            return h;
        }
    }
    // Rounding slack: fall back to the largest hop with positive mass.
    *dist
        .iter()
        .rev()
        .find(|(_, &p)| p > 0.0)
        .map(|(h, _)| h)
        .unwrap()
}

/// Exact entity retrieval: documents titled `query` in ascending id order,
/// padded with the lowest-id remaining distractors. Unknown entities
/// retrieve only distractors.
pub fn retrieve(corpus: &Corpus, query: EntityId, k: usize) -> Vec<DocId> {
    let mut out: Vec<DocId> = corpus
        .title_index
        .get(query.0 as usize)
        .map(|docs| docs.iter().take(k).copied().collect())
        .unwrap_or_default();
    if out.len() < k {
        let need = k - out.len();
        let pad: Vec<DocId> = corpus
            .distractors
            .iter()
            .filter(|d| !out.contains(d))
            .take(need)
            .copied()
            .collect();
        out.extend(pad);
    }
    out
}

/// Accumulated agent state s_t.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvState {
    pub instance_id: u32,
    pub step_index: usize,
    pub visible_entities: BTreeSet<EntityId>,
    pub retrieved_history: Vec<Vec<DocId>>,
}

impl EnvState {
    /// s_0: only the question's start entity is visible.
    pub fn initial(inst: &QAInstance) -> Self {
        EnvState {
            instance_id: inst.instance_id,
            step_index: 0,
            visible_entities: BTreeSet::from([inst.start_entity]),
            retrieved_history: Vec::new(),
        }
    }

    /// Appends an already-retrieved document set, as a query step would.
    pub fn with_retrieved(&self, corpus: &Corpus, docs: Vec<DocId>) -> Self {
        let mut next = self.clone();
        next.step_index += 1;
        for &d in &docs {
            next.visible_entities.extend(corpus.document(d).entities());
        }
        next.retrieved_history.push(docs);
        next
    }
}

/// Deterministic MDP step for a query action.
pub fn transition(state: &EnvState, action: crate::policy::Action, corpus: &Corpus) -> Result<EnvState> {
    match action {
        crate::policy::Action::Query(e) => {
            let docs = retrieve(corpus, e, corpus.retriever_k());
            Ok(state.with_retrieved(corpus, docs))
        }
        crate::policy::Action::Answer(_) => Err(Error::Precondition(
            "answer actions terminate the episode and have no transition".into(),
        )),
    }
}
