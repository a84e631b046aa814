use std::path::Path;

use crate::dsp::read_wav;
use crate::dsp::AudioBuffer;
use crate::{Error, Result};

/// One utterance with its speaker class.
#[derive(Debug, Clone)]
pub struct LabeledAudio {
    pub id: String,
    pub speaker: usize,
    pub audio: AudioBuffer,
}

/// Speaker-labeled audio; `speakers[i]` names class `i`.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub speakers: Vec<String>,
    pub items: Vec<LabeledAudio>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    /// Splits every speaker's utterances into the first `n` and the rest,
    /// keeping class indices.
    pub fn split_per_speaker(&self, n: usize) -> (Dataset, Dataset) {
        let mut head = Dataset {
            speakers: self.speakers.clone(),
            items: Vec::new(),
        };
        let mut tail = head.clone();
        let mut seen = vec![0usize; self.speakers.len()];
        for item in &self.items {
            if seen[item.speaker] < n {
                head.items.push(item.clone());
            } else {
                tail.items.push(item.clone());
            }
            seen[item.speaker] += 1;
        }
        (head, tail)
    }

    /// Reads `root/<speaker>/*.wav`, speakers and files in sorted order.
    /// Utterance ids are `<speaker>/<file stem>`.
    pub fn from_dir(root: &Path) -> Result<Dataset> {
        let mut dirs: Vec<_> = std::fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .collect();
        dirs.sort_by_key(|e| e.file_name());
        let mut ds = Dataset::default();
        for dir in dirs {
            let name = dir.file_name().to_string_lossy().into_owned();
            let mut files: Vec<_> = std::fs::read_dir(dir.path())?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            if files.is_empty() {
                continue;
            }
            files.sort();
            let speaker = ds.speakers.len();
            ds.speakers.push(name.clone());
            for f in files {
                let stem = f.file_stem().unwrap_or_default().to_string_lossy();
                ds.items.push(LabeledAudio {
                    id: format!("{name}/{stem}"),
                    speaker,
                    audio: read_wav(&f)?,
                });
            }
        }
        if ds.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no <speaker>/*.wav files under {}",
                root.display()
            )));
        }
        Ok(ds)
    }
}
