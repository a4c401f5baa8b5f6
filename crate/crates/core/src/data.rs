//! PEG data model and the ground-truth / prediction JSONL formats.
//!
//! Ground truth, one object per line:
//!
//! ```text
//! {"id": str, "tokens": [str], "pairs": [{"spans": [[int,int]], "boxes": [[x1,y1,x2,y2]]}]}
//! ```
//!
//! Predictions, one object per line:
//!
//! ```text
//! {"id": str, "predictions": [{"box": [x1,y1,x2,y2], "spans": [[int,int]], "confidence": f64}]}
//! ```
//!
//! Spans are half-open token intervals over the `tokens` array of the
//! matching ground-truth record. Boxes are normalized to `[0, 1]`.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A single violated record invariant.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecordError {
    #[error("span end {end} exceeds token count {n_text}")]
    SpanOutOfRange { end: usize, n_text: usize },
    #[error("empty span [{start}, {end})")]
    EmptySpan { start: usize, end: usize },
    #[error("empty phrase")]
    EmptyPhrase,
    #[error("pair has no boxes")]
    NoBoxes,
    #[error("degenerate box {0:?}")]
    DegenerateBox([f64; 4]),
    #[error("box {0:?} outside [0,1]")]
    BoxOutOfRange([f64; 4]),
    #[error("confidence out of [0,1]: {0}")]
    ConfidenceOutOfRange(f64),
    #[error("caption has no tokens")]
    NoTokens,
    #[error("token {0} is empty")]
    EmptyToken(usize),
    #[error("empty sample id")]
    EmptyId,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: malformed JSON: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: RecordError,
    },
    #[error("line {line}: duplicate sample id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl DataError {
    /// 1-based line number of the offending record, if any.
    pub fn line(&self) -> Option<usize> {
        match self {
            DataError::Json { line, .. }
            | DataError::Record { line, .. }
            | DataError::DuplicateId { line, .. } => Some(*line),
            DataError::Io(_) => None,
        }
    }
}

/// Caption of one sample, already tokenized by whoever produced the file.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedCaption {
    pub sample_id: String,
    pub tokens: Vec<String>,
}

impl TokenizedCaption {
    pub fn new(sample_id: impl Into<String>, tokens: Vec<String>) -> Result<Self, RecordError> {
        let sample_id = sample_id.into();
        if sample_id.is_empty() {
            return Err(RecordError::EmptyId);
        }
        if tokens.is_empty() {
            return Err(RecordError::NoTokens);
        }
        if let Some(i) = tokens.iter().position(|t| t.is_empty()) {
            return Err(RecordError::EmptyToken(i));
        }
        Ok(Self { sample_id, tokens })
    }

    pub fn n_text(&self) -> usize {
        self.tokens.len()
    }
}

/// Token positions of a phrase as sorted, disjoint, non-adjacent half-open
/// intervals. The empty set is the `no_phrase` value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct PhraseSpans(Vec<(usize, usize)>);

impl PhraseSpans {
    /// Validates against `n_text` and merges overlapping or touching spans.
    pub fn new(spans: &[(usize, usize)], n_text: usize) -> Result<Self, RecordError> {
        for &(start, end) in spans {
            if start >= end {
                return Err(RecordError::EmptySpan { start, end });
            }
            if end > n_text {
                return Err(RecordError::SpanOutOfRange { end, n_text });
            }
        }
        Ok(Self::normalized(spans))
    }

    /// Builds from spans without a token-count bound. Empty intervals are
    /// dropped, the rest merged.
    pub fn normalized(spans: &[(usize, usize)]) -> Self {
        let mut sorted: Vec<(usize, usize)> =
            spans.iter().copied().filter(|(s, e)| s < e).collect();
        sorted.sort_unstable();
        let mut merged: Vec<(usize, usize)> = Vec::with_capacity(sorted.len());
        for (s, e) in sorted {
            match merged.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        Self(merged)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn from_mask(mask: &[bool]) -> Self {
        mask_to_spans(mask)
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of covered tokens.
    pub fn len(&self) -> usize {
        self.0.iter().map(|(s, e)| e - s).sum()
    }

    /// Exclusive upper bound of the covered tokens (0 when empty).
    pub fn end(&self) -> usize {
        self.0.last().map_or(0, |s| s.1)
    }

    pub fn first_token(&self) -> Option<usize> {
        self.0.first().map(|s| s.0)
    }

    pub fn tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().flat_map(|&(s, e)| s..e)
    }

    pub fn to_mask(&self, n_text: usize) -> Result<Vec<bool>, RecordError> {
        spans_to_mask(self, n_text)
    }

    /// Number of tokens covered by both phrases.
    pub fn intersection_len(&self, other: &PhraseSpans) -> usize {
        let (a, b) = (&self.0, &other.0);
        let (mut i, mut j, mut total) = (0, 0, 0);
        while i < a.len() && j < b.len() {
            let lo = a[i].0.max(b[j].0);
            let hi = a[i].1.min(b[j].1);
            if lo < hi {
                total += hi - lo;
            }
            if a[i].1 < b[j].1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        total
    }
}

/// Expands spans into a binary mask of length `n_text`.
pub fn spans_to_mask(spans: &PhraseSpans, n_text: usize) -> Result<Vec<bool>, RecordError> {
    if spans.end() > n_text {
        return Err(RecordError::SpanOutOfRange {
            end: spans.end(),
            n_text,
        });
    }
    let mut mask = vec![false; n_text];
    for j in spans.tokens() {
        mask[j] = true;
    }
    Ok(mask)
}

/// Extracts maximal runs of set bits.
pub fn mask_to_spans(mask: &[bool]) -> PhraseSpans {
    let mut spans = Vec::new();
    let mut start = None;
    for (j, &bit) in mask.iter().enumerate() {
        match (bit, start) {
            (true, None) => start = Some(j),
            (false, Some(s)) => {
                spans.push((s, j));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, mask.len()));
    }
    PhraseSpans(spans)
}

/// Axis-aligned box in normalized corner coordinates.
///
/// Use [`BoxXYXY::new`] for validated construction; the fields are public for
/// reading and for kernels that already guarantee the invariants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXYXY {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, RecordError> {
        let raw = [x1, y1, x2, y2];
        if raw.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(RecordError::BoxOutOfRange(raw));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(RecordError::DegenerateBox(raw));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_array(raw: [f64; 4]) -> Result<Self, RecordError> {
        Self::new(raw[0], raw[1], raw[2], raw[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn contains(&self, other: &BoxXYXY) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

/// One phrase of the caption and every object box it refers to.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingPair {
    pub phrase: PhraseSpans,
    pub boxes: Vec<BoxXYXY>,
}

impl GroundingPair {
    pub fn new(phrase: PhraseSpans, boxes: Vec<BoxXYXY>) -> Result<Self, RecordError> {
        if phrase.is_empty() {
            return Err(RecordError::EmptyPhrase);
        }
        if boxes.is_empty() {
            return Err(RecordError::NoBoxes);
        }
        Ok(Self { phrase, boxes })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PegSampleGT {
    pub caption: TokenizedCaption,
    pub pairs: Vec<GroundingPair>,
}

impl PegSampleGT {
    pub fn sample_id(&self) -> &str {
        &self.caption.sample_id
    }

    pub fn n_text(&self) -> usize {
        self.caption.n_text()
    }

    /// Region-phrase targets, one per (box, phrase) combination, in pair
    /// order then box order.
    pub fn targets(&self) -> impl Iterator<Item = (&BoxXYXY, &PhraseSpans)> + '_ {
        self.pairs
            .iter()
            .flat_map(|p| p.boxes.iter().map(move |b| (b, &p.phrase)))
    }

    pub fn n_targets(&self) -> usize {
        self.pairs.iter().map(|p| p.boxes.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PegPrediction {
    pub bbox: BoxXYXY,
    /// Empty means `no_phrase`.
    pub phrase: PhraseSpans,
    pub confidence: f64,
}

impl PegPrediction {
    pub fn new(bbox: BoxXYXY, phrase: PhraseSpans, confidence: f64) -> Result<Self, RecordError> {
        if !confidence.is_finite() || !(0.0..=1.0).contains(&confidence) {
            return Err(RecordError::ConfidenceOutOfRange(confidence));
        }
        Ok(Self {
            bbox,
            phrase,
            confidence,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PegPredictionSet {
    pub sample_id: String,
    pub predictions: Vec<PegPrediction>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct GtRecord {
    id: String,
    tokens: Vec<String>,
    pairs: Vec<PairRecord>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct PairRecord {
    spans: Vec<[usize; 2]>,
    boxes: Vec<[f64; 4]>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct PredSetRecord {
    id: String,
    predictions: Vec<PredRecord>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct PredRecord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    spans: Vec<[usize; 2]>,
    confidence: f64,
}

fn as_pairs(spans: &[[usize; 2]]) -> Vec<(usize, usize)> {
    spans.iter().map(|s| (s[0], s[1])).collect()
}

fn as_arrays(spans: &PhraseSpans) -> Vec<[usize; 2]> {
    spans.spans().iter().map(|&(s, e)| [s, e]).collect()
}

impl GtRecord {
    fn into_sample(self) -> Result<PegSampleGT, RecordError> {
        let caption = TokenizedCaption::new(self.id, self.tokens)?;
        let n_text = caption.n_text();
        let pairs = self
            .pairs
            .into_iter()
            .map(|p| {
                let phrase = PhraseSpans::new(&as_pairs(&p.spans), n_text)?;
                let boxes = p
                    .boxes
                    .into_iter()
                    .map(BoxXYXY::from_array)
                    .collect::<Result<Vec<_>, _>>()?;
                GroundingPair::new(phrase, boxes)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PegSampleGT { caption, pairs })
    }

    fn from_sample(sample: &PegSampleGT) -> Self {
        Self {
            id: sample.caption.sample_id.clone(),
            tokens: sample.caption.tokens.clone(),
            pairs: sample
                .pairs
                .iter()
                .map(|p| PairRecord {
                    spans: as_arrays(&p.phrase),
                    boxes: p.boxes.iter().map(|b| b.to_array()).collect(),
                })
                .collect(),
        }
    }
}

impl PredSetRecord {
    fn into_set(self) -> Result<PegPredictionSet, RecordError> {
        if self.id.is_empty() {
            return Err(RecordError::EmptyId);
        }
        let predictions = self
            .predictions
            .into_iter()
            .map(|p| {
                let phrase_spans = as_pairs(&p.spans);
                if let Some(&(start, end)) = phrase_spans.iter().find(|(s, e)| s >= e) {
                    return Err(RecordError::EmptySpan { start, end });
                }
                let phrase = PhraseSpans::normalized(&phrase_spans);
                PegPrediction::new(BoxXYXY::from_array(p.bbox)?, phrase, p.confidence)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PegPredictionSet {
            sample_id: self.id,
            predictions,
        })
    }

    fn from_set(set: &PegPredictionSet) -> Self {
        Self {
            id: set.sample_id.clone(),
            predictions: set
                .predictions
                .iter()
                .map(|p| PredRecord {
                    bbox: p.bbox.to_array(),
                    spans: as_arrays(&p.phrase),
                    confidence: p.confidence,
                })
                .collect(),
        }
    }
}

/// Records that parsed cleanly, each with its 1-based line number, plus every
/// line-level problem encountered. Used by validation, which reports all
/// violations instead of stopping at the first.
#[derive(Debug)]
pub struct ParsedFile<T> {
    pub records: Vec<(usize, T)>,
    pub errors: Vec<DataError>,
}

impl<T> ParsedFile<T> {
    fn into_strict(self) -> Result<Vec<T>, DataError> {
        match self.errors.into_iter().next() {
            Some(e) => Err(e),
            None => Ok(self.records.into_iter().map(|(_, r)| r).collect()),
        }
    }
}

fn scan_lines<R, Raw, T>(
    reader: R,
    convert: impl Fn(Raw) -> Result<T, RecordError>,
    id_of: impl Fn(&T) -> &str,
) -> Result<ParsedFile<T>, DataError>
where
    R: BufRead,
    Raw: for<'de> Deserialize<'de>,
{
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: Raw = match serde_json::from_str(&line) {
            Ok(raw) => raw,
            Err(source) => {
                errors.push(DataError::Json {
                    line: line_no,
                    source,
                });
                continue;
            }
        };
        match convert(raw) {
            Ok(rec) => {
                let id = id_of(&rec).to_owned();
                if !seen.insert(id.clone()) {
                    errors.push(DataError::DuplicateId { line: line_no, id });
                } else {
                    records.push((line_no, rec));
                }
            }
            Err(source) => errors.push(DataError::Record {
                line: line_no,
                source,
            }),
        }
    }
    Ok(ParsedFile { records, errors })
}

pub fn scan_ground_truth<R: BufRead>(reader: R) -> Result<ParsedFile<PegSampleGT>, DataError> {
    scan_lines(reader, GtRecord::into_sample, |s: &PegSampleGT| {
        s.sample_id()
    })
}

pub fn scan_predictions<R: BufRead>(reader: R) -> Result<ParsedFile<PegPredictionSet>, DataError> {
    scan_lines(reader, PredSetRecord::into_set, |s: &PegPredictionSet| {
        &s.sample_id
    })
}

/// A prediction record inconsistent with the ground-truth file.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CrossFileError {
    #[error("line {line}: sample id {id:?} not in ground truth")]
    UnknownSample { line: usize, id: String },
    #[error("line {line}: prediction {index} span end {end} exceeds token count {n_text}")]
    SpanOutOfRange {
        line: usize,
        index: usize,
        end: usize,
        n_text: usize,
    },
}

/// Every cross-file violation, in prediction-file order.
pub fn cross_file_violations(
    gt: &[PegSampleGT],
    preds: &[(usize, PegPredictionSet)],
) -> Vec<CrossFileError> {
    let n_text: std::collections::HashMap<&str, usize> =
        gt.iter().map(|s| (s.sample_id(), s.n_text())).collect();
    let mut out = Vec::new();
    for (line, set) in preds {
        let Some(&n) = n_text.get(set.sample_id.as_str()) else {
            out.push(CrossFileError::UnknownSample {
                line: *line,
                id: set.sample_id.clone(),
            });
            continue;
        };
        for (index, p) in set.predictions.iter().enumerate() {
            if p.phrase.end() > n {
                out.push(CrossFileError::SpanOutOfRange {
                    line: *line,
                    index,
                    end: p.phrase.end(),
                    n_text: n,
                });
            }
        }
    }
    out
}

/// Parses a ground-truth JSONL stream, failing on the first bad line.
pub fn parse_ground_truth<R: BufRead>(reader: R) -> Result<Vec<PegSampleGT>, DataError> {
    scan_ground_truth(reader)?.into_strict()
}

/// Parses a prediction JSONL stream, failing on the first bad line.
pub fn parse_predictions<R: BufRead>(reader: R) -> Result<Vec<PegPredictionSet>, DataError> {
    scan_predictions(reader)?.into_strict()
}

pub fn write_ground_truth<W: Write>(samples: &[PegSampleGT], mut out: W) -> std::io::Result<()> {
    for sample in samples {
        serde_json::to_writer(&mut out, &GtRecord::from_sample(sample))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_predictions<W: Write>(sets: &[PegPredictionSet], mut out: W) -> std::io::Result<()> {
    for set in sets {
        serde_json::to_writer(&mut out, &PredSetRecord::from_set(set))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt(text: &str) -> Result<Vec<PegSampleGT>, DataError> {
        parse_ground_truth(text.as_bytes())
    }

    #[test]
    fn minimal_ground_truth_record() {
        let samples = gt(
            r#"{"id":"s1","tokens":["two","pandas"],"pairs":[{"spans":[[0,2]],"boxes":[[0.1,0.1,0.5,0.9]]}]}"#,
        )
        .unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].pairs.len(), 1);
        assert_eq!(samples[0].pairs[0].phrase.spans(), &[(0, 2)]);
    }

    #[test]
    fn span_past_token_count() {
        let err = gt(
            r#"{"id":"s1","tokens":["two","pandas"],"pairs":[{"spans":[[0,3]],"boxes":[[0.1,0.1,0.5,0.9]]}]}"#,
        )
        .unwrap_err();
        assert_eq!(err.line(), Some(1));
        assert!(
            err.to_string().contains("span end 3 exceeds token count 2"),
            "{err}"
        );
    }

    #[test]
    fn degenerate_box_rejected() {
        let err = gt(
            r#"{"id":"s1","tokens":["two","pandas"],"pairs":[{"spans":[[0,2]],"boxes":[[0.5,0.1,0.5,0.9]]}]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("degenerate box"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = concat!(
            r#"{"id":"a","tokens":["x"],"pairs":[]}"#,
            "\n",
            "{not json\n"
        );
        let err = gt(text).unwrap_err();
        assert!(matches!(err, DataError::Json { line: 2, .. }));
    }

    #[test]
    fn empty_phrase_and_duplicate_id() {
        let err = gt(r#"{"id":"a","tokens":["x"],"pairs":[{"spans":[],"boxes":[[0,0,1,1]]}]}"#)
            .unwrap_err();
        assert!(err.to_string().contains("empty phrase"));

        let line = r#"{"id":"a","tokens":["x"],"pairs":[]}"#;
        let err = gt(&format!("{line}\n{line}\n")).unwrap_err();
        assert!(matches!(err, DataError::DuplicateId { line: 2, .. }));
    }

    #[test]
    fn prediction_records() {
        let ok = parse_predictions(
            r#"{"id":"s1","predictions":[{"box":[0.1,0.1,0.5,0.9],"spans":[[0,2]],"confidence":0.9}]}"#
                .as_bytes(),
        )
        .unwrap();
        assert_eq!(ok[0].predictions.len(), 1);

        let err = parse_predictions(
            r#"{"id":"s1","predictions":[{"box":[0.1,0.1,0.5,0.9],"spans":[[0,2]],"confidence":1.5}]}"#
                .as_bytes(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("confidence out of [0,1]"), "{err}");

        let empty = parse_predictions(
            r#"{"id":"s1","predictions":[{"box":[0.1,0.1,0.5,0.9],"spans":[],"confidence":0.3}]}"#
                .as_bytes(),
        )
        .unwrap();
        assert!(empty[0].predictions[0].phrase.is_empty());
    }

    #[test]
    fn scan_collects_every_error() {
        let text = concat!(
            r#"{"id":"a","tokens":["x"],"pairs":[{"spans":[[0,2]],"boxes":[[0,0,1,1]]}]}"#,
            "\n",
            r#"{"id":"b","tokens":["x"],"pairs":[]}"#,
            "\n",
            "[]\n"
        );
        let parsed = scan_ground_truth(text.as_bytes()).unwrap();
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.records[0].0, 2);
        let lines: Vec<_> = parsed.errors.iter().map(|e| e.line()).collect();
        assert_eq!(lines, vec![Some(1), Some(3)]);
    }

    #[test]
    fn mask_examples() {
        let s = PhraseSpans::new(&[(1, 3)], 4).unwrap();
        assert_eq!(
            spans_to_mask(&s, 4).unwrap(),
            vec![false, true, true, false]
        );
        assert_eq!(
            spans_to_mask(&PhraseSpans::empty(), 3).unwrap(),
            vec![false; 3]
        );
        let s = PhraseSpans::new(&[(0, 1), (2, 4)], 4).unwrap();
        assert_eq!(spans_to_mask(&s, 4).unwrap(), vec![true, false, true, true]);
        assert!(spans_to_mask(&s, 3).is_err());

        assert_eq!(
            mask_to_spans(&[false, true, true, false]).spans(),
            &[(1, 3)]
        );
        assert_eq!(mask_to_spans(&[true, true, true]).spans(), &[(0, 3)]);
        assert_eq!(
            mask_to_spans(&[true, false, true]).spans(),
            &[(0, 1), (2, 3)]
        );
    }

    #[test]
    fn adjacent_and_overlapping_spans_merge() {
        let s = PhraseSpans::new(&[(3, 5), (0, 1), (1, 2), (4, 6)], 8).unwrap();
        assert_eq!(s.spans(), &[(0, 2), (3, 6)]);
        assert_eq!(s.len(), 5);
    }

    #[test]
    fn ground_truth_reserialization_is_semantically_identical() {
        let text = concat!(
            r#"{"pairs":[{"boxes":[[0.1,0.2,0.3,0.4],[0.5,0.5,0.9,0.95]],"spans":[[2,4]]}],"tokens":["a","b","c","d"],"id":"z"}"#,
            "\n",
            r#"{"id":"y","tokens":["q"],"pairs":[]}"#,
            "\n"
        );
        let samples = gt(text).unwrap();
        let mut buf = Vec::new();
        write_ground_truth(&samples, &mut buf).unwrap();
        let again = parse_ground_truth(buf.as_slice()).unwrap();
        assert_eq!(samples, again);

        // Field order in the source does not matter once parsed.
        let a: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let b: serde_json::Value =
            serde_json::from_slice(buf.split(|c| *c == b'\n').next().unwrap()).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn mask_round_trip(mask in proptest::collection::vec(any::<bool>(), 1..40)) {
            let spans = mask_to_spans(&mask);
            prop_assert_eq!(spans_to_mask(&spans, mask.len()).unwrap(), mask.clone());
            let again = mask_to_spans(&spans_to_mask(&spans, mask.len()).unwrap());
            prop_assert_eq!(again, spans);
        }
    }
}
