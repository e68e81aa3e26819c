//! Interleaved synchronization of visual frame-group encodings and audio
//! segment encodings.
//!
//! Audio encodings with timestamp `tau` are inserted after the visual group
//! at `t_i` and before the group at `t_{i+1}` when `t_i <= tau < t_{i+1}`.
//! Audio before the first frame is prepended; audio at or after the last
//! frame is appended. Order within each modality is preserved.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "A")]
    Audio,
    #[serde(rename = "V")]
    Visual,
}

impl Modality {
    pub fn tag(self) -> char {
        match self {
            Modality::Audio => 'A',
            Modality::Visual => 'V',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualFrameGroup {
    pub timestamp: f64,
    pub encodings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioSegment {
    pub timestamp: f64,
    pub encodings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedItem {
    pub modality: Modality,
    pub timestamp: f64,
    pub encoding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FusedSequence {
    pub items: Vec<FusedItem>,
}

impl FusedSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Modality tags in fused order, e.g. `"VVAAVVAVV"`.
    pub fn tag_string(&self) -> String {
        self.items.iter().map(|i| i.modality.tag()).collect()
    }
}

impl fmt::Display for FusedSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag_string())
    }
}

/// Merges the two streams into one fused sequence.
pub fn interleave(visual: &[VisualFrameGroup], audio: &[AudioSegment]) -> Result<FusedSequence> {
    let first = visual.first().ok_or(Error::EmptyVisualStream)?;
    let dim = first
        .encodings
        .first()
        .map(Vec::len)
        .ok_or(Error::DimensionMismatch { expected: 1, found: 0 })?;

    for (i, g) in visual.iter().enumerate() {
        if g.encodings.is_empty() {
            return Err(Error::DimensionMismatch { expected: 1, found: 0 });
        }
        check_dims(&g.encodings, dim)?;
        if !g.timestamp.is_finite() || g.timestamp < 0.0 {
            return Err(Error::UnsortedStream(i));
        }
        if i > 0 && g.timestamp <= visual[i - 1].timestamp {
            return Err(Error::UnsortedStream(i));
        }
    }
    for (j, s) in audio.iter().enumerate() {
        check_dims(&s.encodings, dim)?;
        if !s.timestamp.is_finite() || s.timestamp < 0.0 {
            return Err(Error::UnsortedStream(j));
        }
        if j > 0 && s.timestamp < audio[j - 1].timestamp {
            return Err(Error::UnsortedStream(j));
        }
    }

    let total = visual.iter().map(|g| g.encodings.len()).sum::<usize>()
        + audio.iter().map(|s| s.encodings.len()).sum::<usize>();
    let mut items = Vec::with_capacity(total);
    let push_audio = |items: &mut Vec<FusedItem>, s: &AudioSegment| {
        items.extend(s.encodings.iter().map(|e| FusedItem {
            modality: Modality::Audio,
            timestamp: s.timestamp,
            encoding: e.clone(),
        }));
    };

    let mut a = 0;
    while a < audio.len() && audio[a].timestamp < first.timestamp {
        push_audio(&mut items, &audio[a]);
        a += 1;
    }
    for (i, g) in visual.iter().enumerate() {
        items.extend(g.encodings.iter().map(|e| FusedItem {
            modality: Modality::Visual,
            timestamp: g.timestamp,
            encoding: e.clone(),
        }));
        let next = visual.get(i + 1).map_or(f64::INFINITY, |n| n.timestamp);
        while a < audio.len() && audio[a].timestamp < next {
            push_audio(&mut items, &audio[a]);
            a += 1;
        }
    }
    debug_assert_eq!(items.len(), total);
    Ok(FusedSequence { items })
}

fn check_dims(encodings: &[Vec<f64>], dim: usize) -> Result<()> {
    for e in encodings {
        if e.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: e.len(),
            });
        }
    }
    Ok(())
}

/// Arithmetic mean of every encoding in the fused sequence.
pub fn pool_observation(fused: &FusedSequence) -> Result<Vec<f64>> {
    let first = fused.items.first().ok_or(Error::EmptyFusedSequence)?;
    let mut sum = vec![0.0; first.encoding.len()];
    for item in &fused.items {
        for (s, x) in sum.iter_mut().zip(&item.encoding) {
            *s += x;
        }
    }
    let n = fused.items.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// One line of a stream file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub modality: Modality,
    pub timestamp: f64,
    pub vectors: Vec<Vec<f64>>,
}

/// Serializes both streams as stream-file records (visual first, then audio).
pub fn to_stream_records(visual: &[VisualFrameGroup], audio: &[AudioSegment]) -> Vec<StreamRecord> {
    visual
        .iter()
        .map(|g| StreamRecord {
            modality: Modality::Visual,
            timestamp: g.timestamp,
            vectors: g.encodings.clone(),
        })
        .chain(audio.iter().map(|s| StreamRecord {
            modality: Modality::Audio,
            timestamp: s.timestamp,
            vectors: s.encodings.clone(),
        }))
        .collect()
}

/// Splits stream-file records back into the two streams, preserving order.
pub fn from_stream_records(records: &[StreamRecord]) -> (Vec<VisualFrameGroup>, Vec<AudioSegment>) {
    let mut visual = Vec::new();
    let mut audio = Vec::new();
    for r in records {
        match r.modality {
            Modality::Visual => visual.push(VisualFrameGroup {
                timestamp: r.timestamp,
                encodings: r.vectors.clone(),
            }),
            Modality::Audio => audio.push(AudioSegment {
                timestamp: r.timestamp,
                encodings: r.vectors.clone(),
            }),
        }
    }
    (visual, audio)
}
