use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_utterance, DomainSpec, Utterance};
use crate::error::{invalid, Result};

/// Identities and text tokens available to one domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roster {
    pub speakers: Vec<usize>,
    pub emotions: Vec<usize>,
    pub text_tokens: Vec<usize>,
}

/// Sizes of every split. Target splits are stratified by (speaker,
/// emotion) pair, so their counts must be multiples of the pair count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusLayout {
    pub seed: u64,
    pub source: Roster,
    pub source_count: usize,
    pub source_heldout: usize,
    pub target: Roster,
    pub transfer: Roster,
    pub target_train: usize,
    pub target_test: usize,
    pub text_len_min: usize,
    pub text_len_max: usize,
}

impl CorpusLayout {
    /// Source: speakers 0–31, emotions 0–3, all 32 text tokens. Target and
    /// transfer: four unseen speakers and two unseen emotions each, with a
    /// seeded 8-token text subset.
    pub fn standard(seed: u64) -> Self {
        let mut tokens: Vec<usize> = (0..32).collect();
        tokens.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7e47));
        let mut target_text = tokens[..8].to_vec();
        let mut transfer_text = tokens[8..16].to_vec();
        target_text.sort_unstable();
        transfer_text.sort_unstable();
        Self {
            seed,
            source: Roster { speakers: (0..32).collect(), emotions: (0..4).collect(), text_tokens: (0..32).collect() },
            source_count: 20_000,
            source_heldout: 100,
            target: Roster { speakers: (32..36).collect(), emotions: vec![4, 5], text_tokens: target_text },
            transfer: Roster { speakers: (36..40).collect(), emotions: vec![6, 7], text_tokens: transfer_text },
            target_train: 504,
            target_test: 56,
            text_len_min: 3,
            text_len_max: 8,
        }
    }

    fn validate(&self, spec: &DomainSpec) -> Result<()> {
        for (name, r) in [("source", &self.source), ("target", &self.target), ("transfer", &self.transfer)] {
            if r.speakers.is_empty() || r.emotions.is_empty() || r.text_tokens.is_empty() {
                return Err(invalid!("{name} roster is empty"));
            }
            if r.speakers.iter().any(|&s| s >= spec.n_speakers()) || r.emotions.iter().any(|&e| e >= spec.n_emotions()) {
                return Err(invalid!("{name} roster references identities outside the domain"));
            }
            if r.text_tokens.iter().any(|&c| c >= spec.text_vocab) {
                return Err(invalid!("{name} text tokens outside vocabulary"));
            }
        }
        let overlap = |a: &Roster, b: &Roster| {
            a.speakers.iter().any(|s| b.speakers.contains(s)) || a.emotions.iter().any(|e| b.emotions.contains(e))
        };
        if overlap(&self.source, &self.target) || overlap(&self.source, &self.transfer) || overlap(&self.target, &self.transfer) {
            return Err(invalid!("speaker/emotion rosters must be disjoint across domains"));
        }
        for r in [&self.target, &self.transfer] {
            if r.text_tokens.iter().any(|c| !self.source.text_tokens.contains(c)) {
                return Err(invalid!("target text tokens must be a subset of the source's"));
            }
            let pairs = r.speakers.len() * r.emotions.len();
            if self.target_train % pairs != 0 || self.target_test % pairs != 0 || self.target_test == 0 {
                return Err(invalid!("target split sizes must be positive multiples of {pairs} pairs"));
            }
        }
        if self.text_len_min == 0 || self.text_len_min > self.text_len_max {
            return Err(invalid!("bad text length range {}..={}", self.text_len_min, self.text_len_max));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Pretrain,
    SourceHeldout,
    TargetTrain,
    TargetTest,
    TransferTrain,
    TransferTest,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::SourceHeldout => "source-heldout",
            Split::TargetTrain => "target-train",
            Split::TargetTest => "target-test",
            Split::TransferTrain => "transfer-train",
            Split::TransferTest => "transfer-test",
        }
    }

    pub const ALL: [Split; 6] = [
        Split::Pretrain,
        Split::SourceHeldout,
        Split::TargetTrain,
        Split::TargetTest,
        Split::TransferTrain,
        Split::TransferTest,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    /// Seed of the domain spec the split was drawn from.
    pub domain_seed: u64,
    pub split: Split,
    pub count: usize,
    pub speakers: Vec<usize>,
    pub emotions: Vec<usize>,
    pub text_tokens: Vec<usize>,
}

pub struct Corpora {
    pub splits: Vec<(CorpusManifest, Vec<Utterance>)>,
}

impl Corpora {
    pub fn get(&self, split: Split) -> &[Utterance] {
        &self.splits.iter().find(|(m, _)| m.split == split).expect("every split is built").1
    }

    pub fn manifest(&self, split: Split) -> &CorpusManifest {
        &self.splits.iter().find(|(m, _)| m.split == split).expect("every split is built").0
    }

    /// Writes `<split>.jsonl` and `<split>.manifest.json` for every split.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (m, utts) in &self.splits {
            write_jsonl(&dir.join(format!("{}.jsonl", m.split.name())), utts)?;
            let json = serde_json::to_string_pretty(m)?;
            std::fs::write(dir.join(format!("{}.manifest.json", m.split.name())), json + "\n")?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mut splits = Vec::new();
        for split in Split::ALL {
            let m: CorpusManifest =
                serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{}.manifest.json", split.name())))?)?;
            let utts = read_jsonl(&dir.join(format!("{}.jsonl", split.name())))?;
            if utts.len() != m.count {
                return Err(invalid!("{} holds {} utterances, manifest says {}", split.name(), utts.len(), m.count));
            }
            splits.push((m, utts));
        }
        Ok(Self { splits })
    }
}

struct Drawer<'a> {
    spec: &'a DomainSpec,
    layout: &'a CorpusLayout,
    rng: ChaCha8Rng,
}

impl Drawer<'_> {
    fn draw(&mut self, roster: &Roster, s: usize, e: usize, id: String) -> Result<Utterance> {
        let len = self.rng.gen_range(self.layout.text_len_min..=self.layout.text_len_max);
        let text: Vec<usize> = (0..len).map(|_| *roster.text_tokens.choose(&mut self.rng).expect("non-empty")).collect();
        let useed = self.rng.gen();
        let mut u = sample_utterance(self.spec, s, e, &text, useed)?;
        u.id = id;
        Ok(u)
    }

    fn random_identity(&mut self, roster: &Roster, prefix: &str, count: usize) -> Result<Vec<Utterance>> {
        (0..count)
            .map(|i| {
                let s = *roster.speakers.choose(&mut self.rng).expect("non-empty");
                let e = *roster.emotions.choose(&mut self.rng).expect("non-empty");
                self.draw(roster, s, e, format!("{prefix}-{i:05}"))
            })
            .collect()
    }

    /// Train/test drawn per (speaker, emotion) pair in equal numbers.
    fn stratified(&mut self, roster: &Roster, prefix: &str, train: usize, test: usize) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
        let pairs = roster.speakers.len() * roster.emotions.len();
        let (per_train, per_test) = (train / pairs, test / pairs);
        let (mut tr, mut te) = (Vec::with_capacity(train), Vec::with_capacity(test));
        for &s in &roster.speakers {
            for &e in &roster.emotions {
                for _ in 0..per_train {
                    let id = format!("{prefix}-train-{:04}", tr.len());
                    tr.push(self.draw(roster, s, e, id)?);
                }
                for _ in 0..per_test {
                    let id = format!("{prefix}-test-{:04}", te.len());
                    te.push(self.draw(roster, s, e, id)?);
                }
            }
        }
        Ok((tr, te))
    }
}

fn split_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn build_corpora(spec: &DomainSpec, layout: &CorpusLayout) -> Result<Corpora> {
    spec.validate()?;
    layout.validate(spec)?;
    let manifest = |split: Split, r: &Roster, count: usize| CorpusManifest {
        domain_seed: spec.seed,
        split,
        count,
        speakers: r.speakers.clone(),
        emotions: r.emotions.clone(),
        text_tokens: r.text_tokens.clone(),
    };
    let d = |stream| Drawer { spec, layout, rng: split_rng(layout.seed, stream) };
    let pre = d(1).random_identity(&layout.source, "src", layout.source_count)?;
    let held = d(2).random_identity(&layout.source, "held", layout.source_heldout)?;
    let (ttr, tte) = d(3).stratified(&layout.target, "tgt", layout.target_train, layout.target_test)?;
    let (xtr, xte) = d(4).stratified(&layout.transfer, "xfr", layout.target_train, layout.target_test)?;
    let splits = vec![
        (manifest(Split::Pretrain, &layout.source, pre.len()), pre),
        (manifest(Split::SourceHeldout, &layout.source, held.len()), held),
        (manifest(Split::TargetTrain, &layout.target, ttr.len()), ttr),
        (manifest(Split::TargetTest, &layout.target, tte.len()), tte),
        (manifest(Split::TransferTrain, &layout.transfer, xtr.len()), xtr),
        (manifest(Split::TransferTest, &layout.transfer, xte.len()), xte),
    ];
    Ok(Corpora { splits })
}

pub fn write_jsonl(path: &Path, utts: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for u in utts {
        serde_json::to_writer(&mut w, u)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Utterance>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
