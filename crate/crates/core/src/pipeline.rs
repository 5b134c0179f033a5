//! End-to-end orchestration: embed all five schemes at creation time, and at
//! trace time let the harm detector gate decoding and attribution.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bitlevel::{BitCodecParams, BitScheme};
use crate::detector::{self, DetectorModel, EmbeddingPair};
use crate::payload::{self, Fingerprint32, PublicKey, SignedPayload};
use crate::spread::{self, SpreadParams, SpreadScheme};
use crate::{Error, Raster, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "LSB")]
    Lsb,
    #[serde(rename = "DCT")]
    Dct,
    #[serde(rename = "DWT")]
    Dwt,
    #[serde(rename = "SS")]
    Ss,
    #[serde(rename = "DWT-SS")]
    DwtSs,
}

impl Scheme {
    /// Processing order; also the order of summary columns.
    pub const ALL: [Scheme; 5] = [Scheme::Lsb, Scheme::Dct, Scheme::Dwt, Scheme::Ss, Scheme::DwtSs];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Lsb => "LSB",
            Scheme::Dct => "DCT",
            Scheme::Dwt => "DWT",
            Scheme::Ss => "SS",
            Scheme::DwtSs => "DWT-SS",
        }
    }

    /// Accepts `lsb`, `DWT-SS`, `dwt_ss`, ... case-insensitively.
    pub fn parse(name: &str) -> Option<Self> {
        let key = name.trim().to_ascii_lowercase().replace('_', "-");
        Scheme::ALL.into_iter().find(|s| s.name().to_ascii_lowercase() == key)
    }

    fn file_stem(self) -> &'static str {
        match self {
            Scheme::DwtSs => "DWT_SS",
            s => s.name(),
        }
    }

    pub fn bit_level(self) -> Option<BitScheme> {
        match self {
            Scheme::Lsb => Some(BitScheme::Lsb),
            Scheme::Dct => Some(BitScheme::Dct),
            Scheme::Dwt => Some(BitScheme::Dwt),
            _ => None,
        }
    }

    pub fn spread(self) -> Option<SpreadScheme> {
        match self {
            Scheme::Ss => Some(SpreadScheme::Spatial),
            Scheme::DwtSs => Some(SpreadScheme::Wavelet),
            _ => None,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub bit: BitCodecParams,
    pub spread: SpreadParams,
}

impl PipelineParams {
    pub fn for_key(pk: &PublicKey) -> Self {
        PipelineParams {
            bit: BitCodecParams::default(),
            spread: SpreadParams::for_key(pk),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bit.validate()?;
        self.spread.validate()
    }
}

pub fn encode_scheme(img: &Raster, scheme: Scheme, sp: &SignedPayload, params: &PipelineParams) -> Result<Raster> {
    match (scheme.bit_level(), scheme.spread()) {
        (Some(b), _) => b.encode(img, sp, &params.bit),
        (_, Some(s)) => s.encode(img, sp.fingerprint(), &params.spread),
        _ => unreachable!("every scheme is bit-level or spread"),
    }
}

/// What a decoder pulled out of an image, before it is checked against any
/// particular issued payload.
#[derive(Clone, Debug, PartialEq)]
pub enum Recovered {
    Signature(Vec<u8>),
    Fingerprint(Fingerprint32),
    Failed(String),
}

pub fn recover(img: &Raster, scheme: Scheme, bit_length: usize, params: &PipelineParams) -> Recovered {
    let out = match (scheme.bit_level(), scheme.spread()) {
        (Some(b), _) => b.decode(img, bit_length, &params.bit).map(Recovered::Signature),
        (_, Some(SpreadScheme::Spatial)) => spread::recover_ss(img, &params.spread).map(Recovered::Fingerprint),
        (_, Some(SpreadScheme::Wavelet)) => spread::recover_dwtss(img, &params.spread).map(Recovered::Fingerprint),
        _ => unreachable!("every scheme is bit-level or spread"),
    };
    out.unwrap_or_else(|e| Recovered::Failed(e.to_string()))
}

/// Per-scheme evidence backing one verification flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeDiagnostic {
    pub scheme: Scheme,
    pub valid: bool,
    /// Bit-level: Hamming distance between recovered and issued signature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature_bit_errors: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovered_fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ber: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SchemeDiagnostic {
    fn empty(scheme: Scheme) -> Self {
        SchemeDiagnostic {
            scheme,
            valid: false,
            signature_bit_errors: None,
            recovered_fingerprint: None,
            correlation: None,
            ber: None,
            error: None,
        }
    }

    fn failed(scheme: Scheme, reason: impl Into<String>) -> Self {
        SchemeDiagnostic {
            error: Some(reason.into()),
            ..SchemeDiagnostic::empty(scheme)
        }
    }
}

pub fn check_recovered(
    scheme: Scheme,
    recovered: &Recovered,
    sp: &SignedPayload,
    pk: &PublicKey,
    params: &PipelineParams,
) -> SchemeDiagnostic {
    match recovered {
        Recovered::Failed(reason) => SchemeDiagnostic::failed(scheme, reason.clone()),
        Recovered::Signature(candidate) => {
            let errors = candidate
                .iter()
                .zip(&sp.signature)
                .map(|(a, b)| (a ^ b).count_ones())
                .sum::<u32>()
                + 8 * candidate.len().abs_diff(sp.signature.len()) as u32;
            SchemeDiagnostic {
                valid: payload::verify_signature(pk, &sp.payload_bytes, candidate),
                signature_bit_errors: Some(errors),
                ..SchemeDiagnostic::empty(scheme)
            }
        }
        Recovered::Fingerprint(fp) => {
            let m = payload::fingerprint_match(*fp, sp.fingerprint(), params.spread.corr_threshold);
            SchemeDiagnostic {
                valid: m.valid,
                recovered_fingerprint: Some(fp.hex()),
                correlation: Some(m.correlation),
                ber: Some(m.ber),
                ..SchemeDiagnostic::empty(scheme)
            }
        }
    }
}

pub fn verify_scheme(
    img: &Raster,
    scheme: Scheme,
    sp: &SignedPayload,
    pk: &PublicKey,
    params: &PipelineParams,
) -> SchemeDiagnostic {
    check_recovered(scheme, &recover(img, scheme, sp.bit_length, params), sp, pk, params)
}

/// The five per-scheme flags with their evidence, in [`Scheme::ALL`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub v_lsb: bool,
    pub v_dct: bool,
    pub v_dwt: bool,
    pub v_ss: bool,
    pub v_dwt_ss: bool,
    pub diagnostics: Vec<SchemeDiagnostic>,
}

impl VerificationResult {
    pub fn from_diagnostics(diagnostics: Vec<SchemeDiagnostic>) -> Result<Self> {
        let order: Vec<Scheme> = diagnostics.iter().map(|d| d.scheme).collect();
        if order != Scheme::ALL {
            return Err(Error::Shape(format!("diagnostics must cover {:?} in order", Scheme::ALL)));
        }
        let v = |i: usize| diagnostics[i].valid;
        Ok(VerificationResult {
            v_lsb: v(0),
            v_dct: v(1),
            v_dwt: v(2),
            v_ss: v(3),
            v_dwt_ss: v(4),
            diagnostics,
        })
    }

    pub fn flags(&self) -> [bool; 5] {
        [self.v_lsb, self.v_dct, self.v_dwt, self.v_ss, self.v_dwt_ss]
    }

    pub fn flag(&self, scheme: Scheme) -> bool {
        self.flags()[Scheme::ALL.iter().position(|&s| s == scheme).expect("scheme listed")]
    }

    pub fn any(&self) -> bool {
        self.flags().iter().any(|&f| f)
    }

    fn count(&self) -> usize {
        self.flags().iter().filter(|&&f| f).count()
    }

    fn correlation_sum(&self) -> f64 {
        self.diagnostics.iter().filter_map(|d| d.correlation).sum()
    }
}

/// Decodes every scheme from one (possibly attacked) image and checks it
/// against the issued payload.
pub fn verify_all(img: &Raster, sp: &SignedPayload, pk: &PublicKey, params: &PipelineParams) -> VerificationResult {
    let diags = Scheme::ALL
        .iter()
        .map(|&s| verify_scheme(img, s, sp, pk, params))
        .collect();
    VerificationResult::from_diagnostics(diags).expect("built in scheme order")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    /// `f64::INFINITY` for identical images; serialized as `"inf"`.
    #[serde(with = "psnr_serde")]
    pub psnr_db: f64,
    pub max_abs_diff: u8,
    pub mean_abs_diff: f64,
}

mod psnr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR value {t:?}"))),
        }
    }
}

pub fn quality_report(original: &Raster, watermarked: &Raster) -> Result<QualityReport> {
    if !original.same_shape(watermarked) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            original.width(),
            original.height(),
            watermarked.width(),
            watermarked.height()
        )));
    }
    let mut sq = 0u64;
    let mut abs = 0u64;
    let mut max = 0u8;
    for (&a, &b) in original.data().iter().zip(watermarked.data()) {
        let d = a.abs_diff(b);
        max = max.max(d);
        abs += u64::from(d);
        sq += u64::from(d) * u64::from(d);
    }
    let n = original.data().len() as f64;
    let mse = sq as f64 / n;
    let psnr_db = if sq == 0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    };
    Ok(QualityReport {
        psnr_db,
        max_abs_diff: max,
        mean_abs_diff: abs as f64 / n,
    })
}

/// Output of one scheme inside [`process_single_image`].
#[derive(Clone, Debug, PartialEq)]
pub struct SchemeOutput {
    pub scheme: Scheme,
    /// `None` when the encoder rejected the carrier.
    pub encoded: Option<Raster>,
    pub diagnostic: SchemeDiagnostic,
    pub quality: Option<QualityReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedImage {
    pub outputs: Vec<SchemeOutput>,
    pub verification: VerificationResult,
}

/// Embeds `sp` with each scheme in turn and immediately verifies the
/// result. An encoder error (typically capacity) becomes a `false` flag
/// carrying the reason; it never aborts the other schemes.
pub fn process_single_image(
    img: &Raster,
    sp: &SignedPayload,
    pk: &PublicKey,
    params: &PipelineParams,
) -> Result<ProcessedImage> {
    params.validate()?;
    let mut outputs = Vec::with_capacity(Scheme::ALL.len());
    for scheme in Scheme::ALL {
        let out = match encode_scheme(img, scheme, sp, params) {
            Ok(encoded) => SchemeOutput {
                scheme,
                diagnostic: verify_scheme(&encoded, scheme, sp, pk, params),
                quality: Some(quality_report(img, &encoded)?),
                encoded: Some(encoded),
            },
            Err(e) => {
                log::warn!("{scheme}: {e}");
                SchemeOutput {
                    scheme,
                    encoded: None,
                    diagnostic: SchemeDiagnostic::failed(scheme, e.to_string()),
                    quality: None,
                }
            }
        };
        outputs.push(out);
    }
    let verification = VerificationResult::from_diagnostics(outputs.iter().map(|o| o.diagnostic.clone()).collect())?;
    Ok(ProcessedImage { outputs, verification })
}

pub const ORIGINAL_DIR: &str = "Original_image";
pub const ENCODED_DIR: &str = "Encoded_image";
pub const DECODED_DIR: &str = "Decoded_output";
pub const COMPARISON_DIR: &str = "Comparison";
pub const SPREAD_ENCODED_DIR: &str = "Spatial_encoded";
pub const SPREAD_DECODED_DIR: &str = "Spatial_decoded";
pub const SPREAD_COMPARISON_DIR: &str = "Spread_comparison";
pub const SUMMARY_FILE: &str = "summary.csv";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Lays out one processed image under `out_root`:
///
/// ```text
/// Original_image/<stem>.png
/// <stem>/Encoded_image/{LSB,DCT,DWT}.png     <stem>/Spatial_encoded/{SS,DWT_SS}.png
/// <stem>/Decoded_output/{LSB,DCT,DWT}.json   <stem>/Spatial_decoded/{SS,DWT_SS}.json
/// <stem>/Comparison/{LSB,DCT,DWT}.json       <stem>/Spread_comparison/{SS,DWT_SS}.json
/// ```
pub fn write_outputs(out_root: &Path, stem: &str, original: &Raster, processed: &ProcessedImage) -> Result<()> {
    original.save(out_root.join(ORIGINAL_DIR).join(format!("{stem}.png")))?;
    let base = out_root.join(stem);
    for out in &processed.outputs {
        let (enc, dec, cmp) = if out.scheme.bit_level().is_some() {
            (ENCODED_DIR, DECODED_DIR, COMPARISON_DIR)
        } else {
            (SPREAD_ENCODED_DIR, SPREAD_DECODED_DIR, SPREAD_COMPARISON_DIR)
        };
        let file = out.scheme.file_stem();
        if let Some(img) = &out.encoded {
            img.save(base.join(enc).join(format!("{file}.png")))?;
        }
        write_json(&base.join(dec).join(format!("{file}.json")), &out.diagnostic)?;
        if let Some(q) = &out.quality {
            write_json(&base.join(cmp).join(format!("{file}.json")), q)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub image: String,
    pub v_lsb: bool,
    pub v_dct: bool,
    pub v_dwt: bool,
    pub v_ss: bool,
    pub v_dwt_ss: bool,
}

impl SummaryRow {
    pub fn new(image: impl Into<String>, v: &VerificationResult) -> Self {
        SummaryRow {
            image: image.into(),
            v_lsb: v.v_lsb,
            v_dct: v.v_dct,
            v_dwt: v.v_dwt,
            v_ss: v.v_ss,
            v_dwt_ss: v.v_dwt_ss,
        }
    }
}

/// Appends one row, writing the header first if the file is new or empty.
pub fn append_summary_row(path: &Path, row: &SummaryRow) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Issued payloads indexed by the hex key id of the signing key.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PayloadRegistry {
    pub keys: BTreeMap<String, Vec<SignedPayload>>,
}

impl PayloadRegistry {
    pub const FILE_NAME: &'static str = "registry.json";

    /// A missing file is an empty registry.
    pub fn load(path: &Path) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(text) => Ok(serde_json::from_str(&text)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Returns false if the payload was already registered.
    pub fn register(&mut self, key_id: &str, sp: SignedPayload) -> bool {
        let list = self.keys.entry(key_id.to_string()).or_default();
        if list.contains(&sp) {
            return false;
        }
        list.push(sp);
        true
    }

    pub fn candidates(&self, key_id: &str) -> &[SignedPayload] {
        self.keys.get(key_id).map_or(&[], Vec::as_slice)
    }
}

/// Checks an image against each candidate payload and keeps the best one:
/// the most verified flags, then the highest summed spread correlation,
/// then registry order. Each decoder runs once regardless of candidate count.
pub fn verify_against(
    img: &Raster,
    candidates: &[SignedPayload],
    pk: &PublicKey,
    params: &PipelineParams,
) -> Option<(usize, VerificationResult)> {
    let bit_length = candidates.first()?.bit_length;
    let recovered: Vec<(Scheme, Recovered)> = Scheme::ALL
        .iter()
        .map(|&s| (s, recover(img, s, bit_length, params)))
        .collect();
    let mut best: Option<(usize, VerificationResult)> = None;
    for (i, sp) in candidates.iter().enumerate() {
        let diags = recovered
            .iter()
            .map(|(s, r)| {
                if sp.bit_length != bit_length && s.bit_level().is_some() {
                    check_recovered(*s, &recover(img, *s, sp.bit_length, params), sp, pk, params)
                } else {
                    check_recovered(*s, r, sp, pk, params)
                }
            })
            .collect();
        let v = VerificationResult::from_diagnostics(diags).expect("built in scheme order");
        let better = best.as_ref().is_none_or(|(_, b)| {
            (v.count(), v.correlation_sum()) > (b.count(), b.correlation_sum())
        });
        if better {
            best = Some((i, v));
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecoveredIdentity {
    /// A bit-level scheme recovered a signature that verifies.
    Verified {
        scheme: Scheme,
        user_id: String,
        rules_version: u32,
        timestamp: u64,
    },
    /// Only spread-spectrum fingerprints matched the issued payload.
    FingerprintMatch {
        schemes: Vec<Scheme>,
        fingerprint: String,
        best_correlation: f64,
        payload_label: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub sample_id: String,
    pub harmful_probability: f64,
    pub decision: u8,
    pub threshold: f64,
    pub key_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<VerificationResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovered_identity: Option<RecoveredIdentity>,
}

fn identity_from(v: &VerificationResult, sp: &SignedPayload) -> Result<Option<RecoveredIdentity>> {
    for scheme in [Scheme::Lsb, Scheme::Dct, Scheme::Dwt] {
        if v.flag(scheme) {
            let id = sp.identity()?;
            return Ok(Some(RecoveredIdentity::Verified {
                scheme,
                user_id: id.user_id,
                rules_version: id.rules_version,
                timestamp: id.timestamp,
            }));
        }
    }
    let spread: Vec<&SchemeDiagnostic> = v.diagnostics.iter().filter(|d| d.valid && d.scheme.spread().is_some()).collect();
    if spread.is_empty() {
        return Ok(None);
    }
    Ok(Some(RecoveredIdentity::FingerprintMatch {
        schemes: spread.iter().map(|d| d.scheme).collect(),
        fingerprint: sp.fingerprint().hex(),
        best_correlation: spread.iter().filter_map(|d| d.correlation).fold(f64::NEG_INFINITY, f64::max),
        payload_label: sp.plaintext_label.clone(),
    }))
}

/// Classifies `(img, caption)` from its embeddings; only a harmful decision
/// triggers decoding against the payloads registered for `pk`.
pub fn trace(
    img: &Raster,
    pair: &EmbeddingPair,
    model: &DetectorModel,
    pk: &PublicKey,
    candidates: &[SignedPayload],
    params: &PipelineParams,
) -> Result<AttributionReport> {
    params.validate()?;
    let (p, decision) = detector::classify(model, pair)?;
    let mut report = AttributionReport {
        sample_id: pair.id.clone(),
        harmful_probability: p,
        decision,
        threshold: model.threshold,
        key_id: payload::key_id(pk),
        verification: None,
        recovered_identity: None,
    };
    if decision == 0 {
        return Ok(report);
    }
    match verify_against(img, candidates, pk, params) {
        Some((i, v)) => {
            report.recovered_identity = identity_from(&v, &candidates[i])?;
            report.verification = Some(v);
        }
        None => {
            let diags = Scheme::ALL
                .iter()
                .map(|&s| SchemeDiagnostic::failed(s, "no payload registered for this key"))
                .collect();
            report.verification = Some(VerificationResult::from_diagnostics(diags)?);
        }
    }
    Ok(report)
}

/// `<stem>` of an image path, used for per-image output folders.
pub fn image_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

/// Embeds, verifies and writes outputs for one image file; appends its
/// summary row to `<out_root>/summary.csv`.
pub fn process_image_file(
    path: &Path,
    out_root: &Path,
    sp: &SignedPayload,
    pk: &PublicKey,
    params: &PipelineParams,
) -> Result<ProcessedImage> {
    let img = Raster::load(path)?;
    let processed = process_single_image(&img, sp, pk, params)?;
    let stem = image_stem(path);
    write_outputs(out_root, &stem, &img, &processed)?;
    let name = path.file_name().map_or(stem.clone(), |n| n.to_string_lossy().into_owned());
    append_summary_row(&out_root.join(SUMMARY_FILE), &SummaryRow::new(name, &processed.verification))?;
    Ok(processed)
}

/// Serializes a report exactly as the CLI prints it.
pub fn report_json(report: &AttributionReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn write_report_json(path: &Path, report: &AttributionReport) -> Result<PathBuf> {
    let text = report_json(report)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{apply_attack, AttackSpec};
    use crate::corpus::synthesize;
    use crate::payload::tests::test_keypair;
    use crate::payload::{issue, PayloadSpec};

    fn setup() -> (SignedPayload, PipelineParams) {
        let kp = test_keypair();
        let sp = issue(kp, &PayloadSpec::new("alice", 1, 1_700_000_000)).unwrap();
        (sp, PipelineParams::for_key(kp.public_key()))
    }

    /// Model that always outputs `p = σ(b3)`.
    fn constant_model(dim: usize, b3: f64) -> DetectorModel {
        let mut m = DetectorModel::zeros(4 * dim + 1, 2, 2);
        m.b3 = b3;
        m
    }

    fn pair() -> EmbeddingPair {
        EmbeddingPair::new("s1", vec![1.0, 0.5, -0.2], vec![0.3, 0.1, 0.9], None)
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(Scheme::parse(s.name()), Some(s));
        }
        assert_eq!(Scheme::parse("dwt_ss"), Some(Scheme::DwtSs));
        assert_eq!(Scheme::parse("rot13"), None);
    }

    #[test]
    fn clean_carrier_verifies_in_order() {
        let (sp, params) = setup();
        let img = synthesize(256, 256, 21);
        let out = process_single_image(&img, &sp, test_keypair().public_key(), &params).unwrap();
        let order: Vec<Scheme> = out.outputs.iter().map(|o| o.scheme).collect();
        assert_eq!(order, Scheme::ALL);
        let v = &out.verification;
        assert!(v.v_lsb && v.v_ss && v.v_dwt_ss, "{v:?}");
        let lsb = out.outputs[0].quality.unwrap();
        assert!(lsb.max_abs_diff <= 1 && lsb.psnr_db >= 48.0);
    }

    #[test]
    fn tiny_carrier_reports_capacity_without_aborting() {
        let (sp, params) = setup();
        let img = synthesize(8, 8, 1);
        let out = process_single_image(&img, &sp, test_keypair().public_key(), &params).unwrap();
        assert_eq!(out.verification.flags(), [false; 5]);
        assert!(out.verification.diagnostics.iter().all(|d| d.error.is_some()));
        assert!(out.outputs.iter().all(|o| o.encoded.is_none()));
    }

    #[test]
    fn quality_closed_forms() {
        let a = Raster::filled(4, 4, [0, 0, 0]);
        let b = Raster::filled(4, 4, [255, 255, 255]);
        let same = quality_report(&a, &a).unwrap();
        assert!(same.psnr_db.is_infinite() && same.max_abs_diff == 0);
        let q = quality_report(&a, &b).unwrap();
        assert_eq!((q.psnr_db, q.max_abs_diff, q.mean_abs_diff), (0.0, 255, 255.0));
        assert!(quality_report(&a, &Raster::filled(4, 5, [0; 3])).is_err());
        let json = serde_json::to_string(&same).unwrap();
        assert!(json.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<QualityReport>(&json).unwrap(), same);
    }

    #[test]
    fn lsb_psnr_meets_analytic_floor() {
        // Worst case: every one of the 1024 payload samples changes by 1, so
        // MSE = 1024 / (3·w·h) and PSNR = 10·log10(255² · 3·w·h / 1024).
        let (sp, _) = setup();
        let img = synthesize(128, 128, 4);
        let enc = crate::bitlevel::encode_lsb(&img, &sp).unwrap();
        let floor = 10.0 * (255.0f64.powi(2) * (3 * 128 * 128) as f64 / 1024.0).log10();
        let q = quality_report(&img, &enc).unwrap();
        assert!(floor > 48.0);
        assert!(q.psnr_db >= floor - 1e-9 && q.max_abs_diff <= 1);
    }

    #[test]
    fn trace_is_gated_by_the_detector() {
        let (sp, params) = setup();
        let pk = test_keypair().public_key();
        let img = encode_scheme(&synthesize(256, 256, 5), Scheme::Lsb, &sp, &params).unwrap();

        let benign = trace(&img, &pair(), &constant_model(3, -5.0), pk, std::slice::from_ref(&sp), &params).unwrap();
        assert_eq!(benign.decision, 0);
        assert!(benign.verification.is_none() && benign.recovered_identity.is_none());

        let harmful = trace(&img, &pair(), &constant_model(3, 5.0), pk, std::slice::from_ref(&sp), &params).unwrap();
        assert_eq!(harmful.decision, 1);
        assert!(harmful.verification.as_ref().unwrap().v_lsb);
        match harmful.recovered_identity.unwrap() {
            RecoveredIdentity::Verified { scheme, user_id, .. } => {
                assert_eq!((scheme, user_id.as_str()), (Scheme::Lsb, "alice"))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn blurred_spread_image_yields_fingerprint_evidence_only() {
        let (sp, params) = setup();
        let pk = test_keypair().public_key();
        let img = encode_scheme(&synthesize(256, 256, 6), Scheme::Ss, &sp, &params).unwrap();
        let blurred = apply_attack(&img, &AttackSpec::gaussian_blur(0.5)).unwrap();
        let r = trace(&blurred, &pair(), &constant_model(3, 5.0), pk, std::slice::from_ref(&sp), &params).unwrap();
        let v = r.verification.unwrap();
        assert!(!v.v_lsb && !v.v_dct && !v.v_dwt && v.v_ss);
        assert!(matches!(r.recovered_identity, Some(RecoveredIdentity::FingerprintMatch { .. })));
    }

    #[test]
    fn registry_selects_the_matching_payload() {
        let kp = test_keypair();
        let (sp, params) = setup();
        let other = issue(kp, &PayloadSpec::new("bob", 1, 5)).unwrap();
        let img = encode_scheme(&synthesize(256, 256, 7), Scheme::Lsb, &sp, &params).unwrap();
        let (idx, v) = verify_against(&img, &[other.clone(), sp.clone()], kp.public_key(), &params).unwrap();
        assert_eq!(idx, 1);
        assert!(v.v_lsb);
        assert!(verify_against(&img, &[], kp.public_key(), &params).is_none());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(PayloadRegistry::FILE_NAME);
        let mut reg = PayloadRegistry::load(&path).unwrap();
        assert!(reg.register(kp.key_id(), sp.clone()));
        assert!(!reg.register(kp.key_id(), sp.clone()));
        reg.save(&path).unwrap();
        assert_eq!(PayloadRegistry::load(&path).unwrap().candidates(kp.key_id()), &[sp]);
    }

    #[test]
    fn unwatermarked_image_has_no_bit_level_identity() {
        let (sp, params) = setup();
        let img = synthesize(256, 256, 8);
        let v = verify_all(&img, &sp, test_keypair().public_key(), &params);
        assert!(!v.v_lsb && !v.v_dct && !v.v_dwt);
    }

    #[test]
    fn outputs_and_summary_layout() {
        let (sp, params) = setup();
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("cat.png");
        synthesize(256, 256, 9).save(&src).unwrap();
        let out = dir.path().join("out");
        let pk = test_keypair().public_key();
        process_image_file(&src, &out, &sp, pk, &params).unwrap();
        process_image_file(&src, &out, &sp, pk, &params).unwrap();
        for rel in [
            "Original_image/cat.png",
            "cat/Encoded_image/LSB.png",
            "cat/Encoded_image/DCT.png",
            "cat/Encoded_image/DWT.png",
            "cat/Decoded_output/LSB.json",
            "cat/Comparison/DWT.json",
            "cat/Spatial_encoded/SS.png",
            "cat/Spatial_encoded/DWT_SS.png",
            "cat/Spatial_decoded/DWT_SS.json",
            "cat/Spread_comparison/SS.json",
        ] {
            assert!(out.join(rel).is_file(), "{rel} missing");
        }
        let text = std::fs::read_to_string(out.join(SUMMARY_FILE)).unwrap();
        assert_eq!(text.lines().next().unwrap(), "image,v_lsb,v_dct,v_dwt,v_ss,v_dwt_ss");
        let rows = read_summary(&out.join(SUMMARY_FILE)).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], rows[1]);
    }
}
