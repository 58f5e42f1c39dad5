//! Unified token vocabulary: specials, text words, location bins and visual
//! codes share one contiguous id space.
//!
//! Layout (in id order): PAD, BOS, EOS, UNK, then the text lexicon, then
//! `location_bins` coordinate tokens, then `visual_codes` image tokens.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIAL_SURFACES: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const NUM_SPECIALS: usize = 4;

/// Which region of the id space a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Special,
    Text,
    Location,
    Visual,
}

impl Segment {
    pub fn name(self) -> &'static str {
        match self {
            Segment::Special => "special",
            Segment::Text => "text",
            Segment::Location => "location",
            Segment::Visual => "visual",
        }
    }
}

/// Maps a continuous coordinate in [0, extent] to a bin in [0, bins).
///
/// Values exactly at the extent clamp into the last bin; anything outside
/// [0, extent], or a non-finite value, is a range error.
pub fn quantize_bin(value: f64, extent: f64, bins: usize) -> Result<usize> {
    if bins == 0 {
        return Err(Error::Config("quantize with zero bins".to_string()));
    }
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(Error::Range(format!("quantize extent must be positive: {extent}")));
    }
    if !value.is_finite() || value < 0.0 || value > extent {
        return Err(Error::Range(format!(
            "coordinate {value} outside [0, {extent}]"
        )));
    }
    Ok(((value / extent * bins as f64).floor() as usize).min(bins - 1))
}

/// Center of a bin, the inverse of [`quantize_bin`] up to half a bin width.
pub fn dequantize_bin(bin: usize, extent: f64, bins: usize) -> Result<f64> {
    if bin >= bins {
        return Err(Error::Index(format!("bin {bin} exceeds bin count {bins}")));
    }
    Ok((bin as f64 + 0.5) * extent / bins as f64)
}

/// Axis-aligned box with corners (x1, y1) top-left, (x2, y2) bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f32 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f32 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }
}

/// The unified vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    location_bins: usize,
    visual_codes: usize,
    word_index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary over a closed text lexicon.
    ///
    /// Words must be unique, nonempty, lowercase and free of whitespace so
    /// the tokenizer and the file format stay invertible.
    pub fn new(lexicon: &[String], location_bins: usize, visual_codes: usize) -> Result<Self> {
        if location_bins == 0 || visual_codes == 0 {
            return Err(Error::Config(format!(
                "vocabulary needs positive segment sizes, got {location_bins} location bins and {visual_codes} visual codes"
            )));
        }
        let mut word_index = HashMap::new();
        for (i, w) in lexicon.iter().enumerate() {
            if w.is_empty() {
                return Err(Error::Config(format!("lexicon word {i} is empty")));
            }
            if w.chars().any(|c| c.is_whitespace()) {
                return Err(Error::Config(format!(
                    "lexicon word {w:?} contains whitespace"
                )));
            }
            if *w != w.to_lowercase() {
                return Err(Error::Config(format!(
                    "lexicon word {w:?} is not lowercase"
                )));
            }
            let id = (NUM_SPECIALS + i) as u32;
            if word_index.insert(w.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate lexicon word {w:?}")));
            }
        }
        Ok(Vocabulary {
            words: lexicon.to_vec(),
            location_bins,
            visual_codes,
            word_index,
        })
    }

    pub fn len(&self) -> usize {
        NUM_SPECIALS + self.words.len() + self.location_bins + self.visual_codes
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn location_bins(&self) -> usize {
        self.location_bins
    }

    pub fn visual_codes(&self) -> usize {
        self.visual_codes
    }

    pub fn text_words(&self) -> &[String] {
        &self.words
    }

    fn text_start(&self) -> u32 {
        NUM_SPECIALS as u32
    }

    pub fn location_start(&self) -> u32 {
        (NUM_SPECIALS + self.words.len()) as u32
    }

    pub fn visual_start(&self) -> u32 {
        self.location_start() + self.location_bins as u32
    }

    /// Segment of an id; ids past the end are an index error.
    pub fn segment_of(&self, id: u32) -> Result<Segment> {
        if id < self.text_start() {
            Ok(Segment::Special)
        } else if id < self.location_start() {
            Ok(Segment::Text)
        } else if id < self.visual_start() {
            Ok(Segment::Location)
        } else if (id as usize) < self.len() {
            Ok(Segment::Visual)
        } else {
            Err(Error::Index(format!(
                "token id {id} exceeds vocabulary size {}",
                self.len()
            )))
        }
    }

    /// Printable surface form of any id.
    pub fn surface(&self, id: u32) -> Result<String> {
        Ok(match self.segment_of(id)? {
            Segment::Special => SPECIAL_SURFACES[id as usize].to_string(),
            Segment::Text => self.words[(id - self.text_start()) as usize].clone(),
            Segment::Location => format!("<loc_{}>", id - self.location_start()),
            Segment::Visual => format!("<code_{}>", id - self.visual_start()),
        })
    }

    /// Whitespace tokenizer with lowercasing; unknown words map to UNK.
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| {
                let lw = w.to_lowercase();
                self.word_index.get(&lw).copied().unwrap_or(UNK)
            })
            .collect()
    }

    /// Inverse of [`encode_text`] for text-segment ids only.
    pub fn decode_text(&self, ids: &[u32]) -> Result<String> {
        let mut out = Vec::with_capacity(ids.len());
        for (pos, &id) in ids.iter().enumerate() {
            match self.segment_of(id)? {
                Segment::Text => out.push(self.words[(id - self.text_start()) as usize].as_str()),
                seg => {
                    return Err(Error::Segment(format!(
                        "id {id} at position {pos} is in the {} segment, expected text",
                        seg.name()
                    )))
                }
            }
        }
        Ok(out.join(" "))
    }

    /// Token id of a location bin.
    pub fn location_token(&self, bin: usize) -> Result<u32> {
        if bin >= self.location_bins {
            return Err(Error::Index(format!(
                "location bin {bin} exceeds {}",
                self.location_bins
            )));
        }
        Ok(self.location_start() + bin as u32)
    }

    /// Bin index of a location token.
    pub fn location_bin(&self, id: u32) -> Result<usize> {
        match self.segment_of(id)? {
            Segment::Location => Ok((id - self.location_start()) as usize),
            seg => Err(Error::Segment(format!(
                "id {id} is in the {} segment, expected location",
                seg.name()
            ))),
        }
    }

    /// Token id of a visual code.
    pub fn visual_token(&self, code: usize) -> Result<u32> {
        if code >= self.visual_codes {
            return Err(Error::Index(format!(
                "visual code {code} exceeds {}",
                self.visual_codes
            )));
        }
        Ok(self.visual_start() + code as u32)
    }

    /// Code index of a visual token.
    pub fn visual_code(&self, id: u32) -> Result<usize> {
        match self.segment_of(id)? {
            Segment::Visual => Ok((id - self.visual_start()) as usize),
            seg => Err(Error::Segment(format!(
                "id {id} is in the {} segment, expected visual",
                seg.name()
            ))),
        }
    }

    /// Quantizes a box into four location tokens in x1, y1, x2, y2 order.
    pub fn box_to_tokens(&self, b: &BBox, width: f64, height: f64) -> Result<[u32; 4]> {
        let bins = self.location_bins;
        Ok([
            self.location_token(quantize_bin(b.x1 as f64, width, bins)?)?,
            self.location_token(quantize_bin(b.y1 as f64, height, bins)?)?,
            self.location_token(quantize_bin(b.x2 as f64, width, bins)?)?,
            self.location_token(quantize_bin(b.y2 as f64, height, bins)?)?,
        ])
    }

    /// Decodes four location tokens back to a box of bin centers.
    ///
    /// Fails with a decode error naming the offending position when a token
    /// is out of segment or the corners are inverted.
    pub fn tokens_to_box(&self, ids: &[u32], width: f64, height: f64) -> Result<BBox> {
        if ids.len() != 4 {
            return Err(Error::Decode(format!(
                "a box needs exactly 4 location tokens, got {}",
                ids.len()
            )));
        }
        let mut bins = [0usize; 4];
        for (pos, &id) in ids.iter().enumerate() {
            bins[pos] = self.location_bin(id).map_err(|e| {
                Error::Decode(format!("box token at position {pos}: {e}"))
            })?;
        }
        if bins[2] < bins[0] {
            return Err(Error::Decode(format!(
                "box corners inverted on x: x2 bin {} < x1 bin {}",
                bins[2], bins[0]
            )));
        }
        if bins[3] < bins[1] {
            return Err(Error::Decode(format!(
                "box corners inverted on y: y2 bin {} < y1 bin {}",
                bins[3], bins[1]
            )));
        }
        let nb = self.location_bins;
        Ok(BBox {
            x1: dequantize_bin(bins[0], width, nb)? as f32,
            y1: dequantize_bin(bins[1], height, nb)? as f32,
            x2: dequantize_bin(bins[2], width, nb)? as f32,
            y2: dequantize_bin(bins[3], height, nb)? as f32,
        })
    }

    /// Serializes as `segment<TAB>id<TAB>surface` lines, LF-terminated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for id in 0..self.len() as u32 {
            let seg = self.segment_of(id).expect("id in range");
            let surface = self.surface(id).expect("id in range");
            out.push_str(seg.name());
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\t');
            out.push_str(&surface);
            out.push('\n');
        }
        out
    }

    /// Parses the [`Vocabulary::to_text`] format, validating segment order,
    /// id contiguity and surface forms.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut words = Vec::new();
        let mut location_bins = 0usize;
        let mut visual_codes = 0usize;
        let mut specials_seen = 0usize;
        let order = ["special", "text", "location", "visual"];
        let mut max_stage = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.splitn(3, '\t');
            let (seg, id_str, surface) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => {
                    return Err(Error::Parse(format!(
                        "vocab line {}: expected 3 tab-separated fields",
                        lineno + 1
                    )))
                }
            };
            let id: u32 = id_str.parse().map_err(|_| {
                Error::Parse(format!("vocab line {}: bad id {id_str:?}", lineno + 1))
            })?;
            if id as usize != lineno {
                return Err(Error::Parse(format!(
                    "vocab line {}: id {id} breaks contiguity",
                    lineno + 1
                )));
            }
            let stage = order.iter().position(|&s| s == seg).ok_or_else(|| {
                Error::Parse(format!("vocab line {}: unknown segment {seg:?}", lineno + 1))
            })?;
            if stage < max_stage {
                return Err(Error::Parse(format!(
                    "vocab line {}: segment {seg} out of order",
                    lineno + 1
                )));
            }
            max_stage = stage;
            match seg {
                "special" => {
                    if specials_seen >= NUM_SPECIALS
                        || surface != SPECIAL_SURFACES[specials_seen]
                    {
                        return Err(Error::Parse(format!(
                            "vocab line {}: unexpected special {surface:?}",
                            lineno + 1
                        )));
                    }
                    specials_seen += 1;
                }
                "text" => words.push(surface.to_string()),
                "location" => location_bins += 1,
                "visual" => visual_codes += 1,
                _ => unreachable!(),
            }
        }
        if specials_seen != NUM_SPECIALS {
            return Err(Error::Parse(format!(
                "vocab file has {specials_seen} specials, expected {NUM_SPECIALS}"
            )));
        }
        if location_bins == 0 || visual_codes == 0 {
            return Err(Error::Parse(
                "vocab file missing location or visual segment".to_string(),
            ));
        }
        Vocabulary::new(&words, location_bins, visual_codes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

/// Intersection over union of two boxes; 0 when either is degenerate.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0) as f64;
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0) as f64;
    let inter = ix * iy;
    let area = |v: &BBox| v.width() as f64 * v.height() as f64;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    fn small_vocab() -> Vocabulary {
        Vocabulary::new(&lex(&["red", "circle", "what", "is"]), 10, 4).unwrap()
    }

    #[test]
    fn segment_layout_is_contiguous() {
        let v = small_vocab();
        assert_eq!(v.len(), 4 + 4 + 10 + 4);
        assert_eq!(v.segment_of(PAD).unwrap(), Segment::Special);
        assert_eq!(v.segment_of(3).unwrap(), Segment::Special);
        assert_eq!(v.segment_of(4).unwrap(), Segment::Text);
        assert_eq!(v.segment_of(7).unwrap(), Segment::Text);
        assert_eq!(v.segment_of(8).unwrap(), Segment::Location);
        assert_eq!(v.segment_of(17).unwrap(), Segment::Location);
        assert_eq!(v.segment_of(18).unwrap(), Segment::Visual);
        assert_eq!(v.segment_of(21).unwrap(), Segment::Visual);
        assert_eq!(v.segment_of(22).unwrap_err().kind(), "index");
    }

    #[test]
    fn encode_decode_roundtrip_lowercases() {
        let v = small_vocab();
        let ids = v.encode_text("What  is RED circle");
        assert_eq!(v.decode_text(&ids).unwrap(), "what is red circle");
        assert_eq!(v.encode_text("unknownword"), vec![UNK]);
    }

    #[test]
    fn decode_text_rejects_non_text_ids() {
        let v = small_vocab();
        let loc = v.location_token(0).unwrap();
        let err = v.decode_text(&[4, loc]).unwrap_err();
        assert_eq!(err.kind(), "segment");
        assert!(err.to_string().contains("position 1"));
    }

    #[test]
    fn quantize_boundaries() {
        // 10 bins over extent 100: bin width 10.
        assert_eq!(quantize_bin(0.0, 100.0, 10).unwrap(), 0);
        assert_eq!(quantize_bin(9.999, 100.0, 10).unwrap(), 0);
        assert_eq!(quantize_bin(10.0, 100.0, 10).unwrap(), 1);
        assert_eq!(quantize_bin(99.999, 100.0, 10).unwrap(), 9);
        // The extent itself clamps into the last bin.
        assert_eq!(quantize_bin(100.0, 100.0, 10).unwrap(), 9);
        assert_eq!(quantize_bin(-0.1, 100.0, 10).unwrap_err().kind(), "range");
        assert_eq!(quantize_bin(100.1, 100.0, 10).unwrap_err().kind(), "range");
        assert_eq!(quantize_bin(f64::NAN, 100.0, 10).unwrap_err().kind(), "range");
    }

    #[test]
    fn dequantize_hits_bin_centers() {
        assert_eq!(dequantize_bin(0, 100.0, 10).unwrap(), 5.0);
        assert_eq!(dequantize_bin(9, 100.0, 10).unwrap(), 95.0);
        assert_eq!(dequantize_bin(10, 100.0, 10).unwrap_err().kind(), "index");
    }

    #[test]
    fn quantize_dequantize_error_bound() {
        // |x - deq(q(x))| <= extent / (2 * bins), verified by dense sweep.
        let (extent, bins) = (32.0, 1000);
        let half_width = extent / (2.0 * bins as f64);
        for i in 0..=3200 {
            let x = i as f64 * 0.01;
            let b = quantize_bin(x, extent, bins).unwrap();
            let back = dequantize_bin(b, extent, bins).unwrap();
            // The clamped final bin stretches the bound by at most one width.
            let tol = if b == bins - 1 { 3.0 * half_width } else { half_width + 1e-12 };
            assert!((x - back).abs() <= tol, "x={x} back={back}");
        }
    }

    #[test]
    fn box_roundtrip_order_and_values() {
        let v = Vocabulary::new(&lex(&["a"]), 1000, 4).unwrap();
        let b = BBox::new(2.0, 4.0, 10.0, 12.0);
        let toks = v.box_to_tokens(&b, 32.0, 32.0).unwrap();
        // x1, y1, x2, y2 order: bins 62, 125, 312, 375.
        let bins: Vec<usize> = toks.iter().map(|&t| v.location_bin(t).unwrap()).collect();
        assert_eq!(bins, vec![62, 125, 312, 375]);
        let back = v.tokens_to_box(&toks, 32.0, 32.0).unwrap();
        // Coordinates landing mid-bin (2.0 -> 62.5) roundtrip exactly; bin
        // edges (4.0 -> 125.0) shift by half a bin width, 0.016 here.
        assert!((back.x1 - 2.0).abs() < 1e-6);
        assert!((back.y1 - 4.016).abs() < 1e-6);
        assert!((back.x2 - 10.0).abs() < 1e-6);
        assert!((back.y2 - 12.016).abs() < 1e-6);
        for (orig, got) in [(2.0, back.x1), (4.0, back.y1), (10.0, back.x2), (12.0, back.y2)] {
            assert!((orig - got).abs() <= 32.0 / 2000.0 + 1e-6);
        }
    }

    #[test]
    fn tokens_to_box_error_cases() {
        let v = small_vocab();
        let l = |b: usize| v.location_token(b).unwrap();
        // Wrong arity.
        assert_eq!(v.tokens_to_box(&[l(0)], 10.0, 10.0).unwrap_err().kind(), "decode");
        // Wrong segment at position 2.
        let err = v.tokens_to_box(&[l(0), l(0), 4, l(5)], 10.0, 10.0).unwrap_err();
        assert_eq!(err.kind(), "decode");
        assert!(err.to_string().contains("position 2"), "{err}");
        // Inverted corners.
        let err = v.tokens_to_box(&[l(5), l(0), l(2), l(9)], 10.0, 10.0).unwrap_err();
        assert!(err.to_string().contains("inverted on x"), "{err}");
    }

    #[test]
    fn box_roundtrip_iou_bound_brute_force() {
        // Empirical roundtrip bound over 10^4 seeded random boxes. For a box
        // with both sides >= extent / 10 and bin width delta = extent / bins,
        // each edge moves at most delta / 2, so IoU >= ((s - delta) / (s +
        // delta))^2 >= 1 - 40 / bins at the side floor. The sweep checks the
        // analytic worst case and records the observed minimum stays above it.
        let v = Vocabulary::new(&lex(&["a"]), 1000, 4).unwrap();
        let (extent, bins) = (32.0f64, 1000.0f64);
        let min_side = extent / 10.0;
        let mut rng = crate::rng::CounterRng::new(77, 0);
        let mut worst: f64 = 1.0;
        for _ in 0..10_000 {
            let w = min_side + rng.next_f64() * (extent - min_side);
            let h = min_side + rng.next_f64() * (extent - min_side);
            let x1 = rng.next_f64() * (extent - w);
            let y1 = rng.next_f64() * (extent - h);
            let b = BBox::new(x1 as f32, y1 as f32, (x1 + w) as f32, (y1 + h) as f32);
            let toks = v.box_to_tokens(&b, extent, extent).unwrap();
            let back = v.tokens_to_box(&toks, extent, extent).unwrap();
            worst = worst.min(iou(&b, &back));
        }
        let analytic_floor = 1.0 - 40.0 / bins;
        assert!(
            worst >= analytic_floor,
            "worst roundtrip IoU {worst} below floor {analytic_floor}"
        );
    }

    #[test]
    fn vocab_file_roundtrip_is_field_identical() {
        let v = small_vocab();
        let text = v.to_text();
        let back = Vocabulary::from_text(&text).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn vocab_file_rejects_corruption() {
        let v = small_vocab();
        let good = v.to_text();
        // Break contiguity.
        let bad = good.replacen("text\t4\t", "text\t9\t", 1);
        assert!(Vocabulary::from_text(&bad).is_err());
        // Reorder segments.
        let mut lines: Vec<&str> = good.lines().collect();
        lines.swap(0, 8);
        assert!(Vocabulary::from_text(&lines.join("\n")).is_err());
        // Drop a field.
        let bad = good.replacen("special\t0\t<pad>", "special\t0", 1);
        assert!(Vocabulary::from_text(&bad).is_err());
    }

    #[test]
    fn lexicon_validation() {
        assert!(Vocabulary::new(&lex(&["ok", "ok"]), 10, 4).is_err());
        assert!(Vocabulary::new(&lex(&["has space"]), 10, 4).is_err());
        assert!(Vocabulary::new(&lex(&["Upper"]), 10, 4).is_err());
        assert!(Vocabulary::new(&lex(&[""]), 10, 4).is_err());
        assert!(Vocabulary::new(&lex(&["fine"]), 0, 4).is_err());
    }

    #[test]
    fn iou_hand_values() {
        // Disjoint, identical, and the 1/7 case:
        // (0,0,10,10) vs (5,5,15,15): inter 25, union 175.
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = BBox::new(5.0, 5.0, 15.0, 15.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        // Degenerate boxes score zero.
        let z = BBox::new(3.0, 3.0, 3.0, 3.0);
        assert_eq!(iou(&z, &z), 0.0);
    }
}
