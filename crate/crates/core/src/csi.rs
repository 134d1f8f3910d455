//! CSI compression-feedback harness.
//!
//! A dataset is the serving-link RE response of a link-channel run, reduced
//! to one unit-norm transmit-space vector per subband (the dominant right
//! singular vector of the stacked port matrices). Codecs compress and
//! restore those vectors; verification reruns the protocol stack with the
//! serving signal scaled by how well the restored vector matches the ideal
//! one.

use std::collections::HashMap;

use num_complex::{Complex32, Complex64};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::channel::export::{self, ReShape};
use crate::combined::{
    run_link_channel, LinkSubset, Pipeline, SampleIndex, SimError, SimMode, SimOutput, SimRequest,
    SimResult, Stages, GENERATOR_VERSION,
};
use crate::linalg::{dominant_eigenvector, fix_phase};
use crate::phy::{linear_to_db, PerfIndicators};
use crate::scenario::{CellId, Scenario};
use crate::store::{canonical_key, DatasetKey, DatasetStore, NewDataset, StoreError};
use crate::users::{MobilityParams, UserId};

pub const EXTRACTION_VERSION: u32 = 1;
pub const NMSE_DB_SENTINEL: f64 = -300.0;
pub const DATASET_KIND: &str = "csi";

#[derive(Debug, Error)]
pub enum CsiError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid parameter `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("sample {index}: {message}")]
    Shape { index: usize, message: String },
    #[error("codec failed on sample {index}: {message}")]
    Codec { index: usize, message: String },
    #[error("no unflagged samples to compare")]
    Empty,
    #[error("stored dataset is malformed: {0}")]
    Malformed(String),
}

fn invalid(field: &str, message: impl Into<String>) -> CsiError {
    CsiError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiDatasetParams {
    pub scenario: Scenario,
    pub n_users: usize,
    #[serde(default)]
    pub mobility: MobilityParams,
    pub seed: u64,
    /// Ticks simulated; a user without a serving cell at a tick contributes
    /// no sample for it.
    pub samples_per_user: usize,
    /// Subband width in REs.
    pub subband_size: usize,
}

impl CsiDatasetParams {
    pub fn num_subbands(&self) -> usize {
        self.scenario.num_re().div_ceil(self.subband_size)
    }

    fn sim_request(&self, mode: SimMode) -> SimRequest {
        SimRequest {
            mode,
            scenario: self.scenario.clone(),
            antenna_overrides: vec![],
            n_users: self.n_users,
            mobility: self.mobility.clone(),
            duration: self.samples_per_user as f64 * self.scenario.tick,
            seed: self.seed,
            link_subset: LinkSubset::Serving,
        }
    }

    pub fn validate(&self) -> Result<(), CsiError> {
        if self.samples_per_user == 0 {
            return Err(invalid("samples_per_user", "must be at least 1"));
        }
        if self.subband_size == 0 || self.subband_size > self.scenario.num_re() {
            return Err(invalid(
                "subband_size",
                "must be between 1 and the number of REs",
            ));
        }
        if self.n_users == 0 {
            return Err(invalid("n_users", "must be at least 1"));
        }
        self.sim_request(SimMode::LinkChannel).validate()?;
        Ok(())
    }

    /// The document the dataset key is computed from.
    pub fn key_document(&self) -> Value {
        json!({
            "kind": DATASET_KIND,
            "extraction_version": EXTRACTION_VERSION,
            "params": self,
        })
    }

    pub fn key(&self) -> Result<DatasetKey, CsiError> {
        Ok(canonical_key(&self.key_document())?)
    }
}

/// Characteristic vectors of one link at one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiSample {
    pub tick_index: u64,
    pub user_id: UserId,
    pub cell_id: CellId,
    pub num_subbands: usize,
    pub tx_ports: usize,
    /// Row-major `(num_subbands, tx_ports)`.
    pub vectors: Vec<Complex64>,
    /// Subbands whose channel was identically zero.
    pub flagged: Vec<bool>,
}

impl CsiSample {
    pub fn vector(&self, subband: usize) -> &[Complex64] {
        &self.vectors[subband * self.tx_ports..(subband + 1) * self.tx_ports]
    }

    /// Same indices and shape, all-zero vectors.
    pub fn zeroed(&self) -> CsiSample {
        CsiSample {
            vectors: vec![Complex64::new(0.0, 0.0); self.vectors.len()],
            ..self.clone()
        }
    }

    fn check_compatible(&self, other: &CsiSample, index: usize) -> Result<(), CsiError> {
        let same_link = (self.tick_index, self.user_id, self.cell_id)
            == (other.tick_index, other.user_id, other.cell_id);
        let same_shape = (self.num_subbands, self.tx_ports, self.vectors.len())
            == (other.num_subbands, other.tx_ports, other.vectors.len());
        if !same_link {
            return Err(CsiError::Shape {
                index,
                message: "restored sample refers to a different link or tick".into(),
            });
        }
        if !same_shape || other.vectors.len() != other.num_subbands * other.tx_ports {
            return Err(CsiError::Shape {
                index,
                message: format!(
                    "expected {} x {} vectors, got {} x {} ({} values)",
                    self.num_subbands,
                    self.tx_ports,
                    other.num_subbands,
                    other.tx_ports,
                    other.vectors.len()
                ),
            });
        }
        if other
            .vectors
            .iter()
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return Err(CsiError::Shape {
                index,
                message: "non-finite value".into(),
            });
        }
        Ok(())
    }
}

/// `h` is one link's response laid out `(re, tx, rx)`.
pub fn extract_characteristic(
    h: &[Complex64],
    num_re: usize,
    tx_ports: usize,
    rx_ports: usize,
    subband_size: usize,
) -> (Vec<Complex64>, Vec<bool>) {
    assert_eq!(h.len(), num_re * tx_ports * rx_ports, "response shape");
    assert!(subband_size > 0, "subband_size must be positive");
    let num_subbands = num_re.div_ceil(subband_size);
    let mut vectors = Vec::with_capacity(num_subbands * tx_ports);
    let mut flagged = Vec::with_capacity(num_subbands);
    let per_re = tx_ports * rx_ports;
    for sb in 0..num_subbands {
        let res = sb * subband_size..((sb + 1) * subband_size).min(num_re);
        // R[a][b] = sum over REs and rx of conj(H[a][r]) H[b][r]
        let mut r = vec![Complex64::new(0.0, 0.0); tx_ports * tx_ports];
        for k in res {
            let m = &h[k * per_re..(k + 1) * per_re];
            for a in 0..tx_ports {
                for b in 0..tx_ports {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for rx in 0..rx_ports {
                        acc += m[a * rx_ports + rx].conj() * m[b * rx_ports + rx];
                    }
                    r[a * tx_ports + b] += acc;
                }
            }
        }
        let trace: f64 = (0..tx_ports).map(|a| r[a * tx_ports + a].re).sum();
        if trace == 0.0 {
            vectors.extend(std::iter::repeat_n(Complex64::new(0.0, 0.0), tx_ports));
            flagged.push(true);
            continue;
        }
        let (_, mut v) = dominant_eigenvector(&r, tx_ports);
        fix_phase(&mut v, 1e-12);
        vectors.extend(v);
        flagged.push(false);
    }
    (vectors, flagged)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nmse {
    pub linear: f64,
    /// [`NMSE_DB_SENTINEL`] when `linear` is zero.
    pub db: f64,
}

impl Nmse {
    pub fn from_linear(linear: f64) -> Self {
        Nmse {
            linear,
            db: if linear > 0.0 {
                linear_to_db(linear)
            } else {
                NMSE_DB_SENTINEL
            },
        }
    }
}

/// Mean over samples of squared error energy over original energy. Flagged
/// subbands are left out of both, and samples with nothing left are skipped.
pub fn nmse(orig: &[CsiSample], restored: &[CsiSample]) -> Result<Nmse, CsiError> {
    if orig.len() != restored.len() {
        return Err(CsiError::Shape {
            index: orig.len().min(restored.len()),
            message: format!("{} originals vs {} restored", orig.len(), restored.len()),
        });
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    for (i, (x, y)) in orig.iter().zip(restored).enumerate() {
        x.check_compatible(y, i)?;
        let mut err = 0.0;
        let mut energy = 0.0;
        for sb in 0..x.num_subbands {
            if x.flagged[sb] {
                continue;
            }
            for (a, b) in x.vector(sb).iter().zip(y.vector(sb)) {
                err += (a - b).norm_sqr();
                energy += a.norm_sqr();
            }
        }
        if energy > 0.0 {
            sum += err / energy;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(CsiError::Empty);
    }
    Ok(Nmse::from_linear(sum / counted as f64))
}

/// Fraction of serving power kept when precoding with `restored` instead of
/// `ideal`: mean over unflagged subbands of `|v^H w|^2 / (|v|^2 |w|^2)`,
/// zero for an all-zero `w`. Fully flagged samples keep everything.
pub fn precoding_gain(ideal: &CsiSample, restored: &CsiSample) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for sb in 0..ideal.num_subbands {
        if ideal.flagged[sb] {
            continue;
        }
        let v = ideal.vector(sb);
        let w = restored.vector(sb);
        let inner: Complex64 = v.iter().zip(w).map(|(a, b)| a.conj() * b).sum();
        let vv: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        let ww: f64 = w.iter().map(|z| z.norm_sqr()).sum();
        sum += if ww > 0.0 {
            inner.norm_sqr() / (vv * ww)
        } else {
            0.0
        };
        n += 1;
    }
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

/// A compressed sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitString {
    pub bits: usize,
    pub bytes: Vec<u8>,
}

pub trait Codec {
    fn compress(&self, sample: &CsiSample) -> Result<BitString, String>;
    /// `template` carries indices and shape only.
    fn decompress(&self, bits: &BitString, template: &CsiSample) -> Result<CsiSample, String>;
}

/// Lossless: raw little-endian f64 pairs.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn compress(&self, sample: &CsiSample) -> Result<BitString, String> {
        let bytes: Vec<u8> = sample
            .vectors
            .iter()
            .flat_map(|z| z.re.to_le_bytes().into_iter().chain(z.im.to_le_bytes()))
            .collect();
        Ok(BitString {
            bits: bytes.len() * 8,
            bytes,
        })
    }

    fn decompress(&self, bits: &BitString, template: &CsiSample) -> Result<CsiSample, String> {
        if bits.bytes.len() != template.vectors.len() * 16 {
            return Err(format!(
                "expected {} bytes, got {}",
                template.vectors.len() * 16,
                bits.bytes.len()
            ));
        }
        let vectors = bits
            .bytes
            .chunks_exact(16)
            .map(|c| {
                Complex64::new(
                    f64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                    f64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
                )
            })
            .collect();
        Ok(CsiSample {
            vectors,
            ..template.clone()
        })
    }
}

/// Sends nothing; restores zeros.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullCodec;

impl Codec for NullCodec {
    fn compress(&self, _: &CsiSample) -> Result<BitString, String> {
        Ok(BitString {
            bits: 0,
            bytes: vec![],
        })
    }

    fn decompress(&self, _: &BitString, template: &CsiSample) -> Result<CsiSample, String> {
        Ok(template.zeroed())
    }
}

/// Uniform scalar quantizer: `bits` per real component over [-1, 1].
#[derive(Debug, Clone, Copy)]
pub struct UniformQuantizer {
    pub bits: u8,
}

impl UniformQuantizer {
    fn levels(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

impl Codec for UniformQuantizer {
    fn compress(&self, sample: &CsiSample) -> Result<BitString, String> {
        if !(1..=16).contains(&self.bits) {
            return Err(format!("bits must be in 1..=16, got {}", self.bits));
        }
        let levels = self.levels() as f64;
        let mut bytes = Vec::with_capacity(sample.vectors.len() * 4);
        for z in &sample.vectors {
            for x in [z.re, z.im] {
                let q = (((x.clamp(-1.0, 1.0) + 1.0) / 2.0) * levels).round() as u16;
                bytes.extend(q.to_le_bytes());
            }
        }
        Ok(BitString {
            bits: sample.vectors.len() * 2 * self.bits as usize,
            bytes,
        })
    }

    fn decompress(&self, bits: &BitString, template: &CsiSample) -> Result<CsiSample, String> {
        if bits.bytes.len() != template.vectors.len() * 4 {
            return Err(format!(
                "expected {} bytes, got {}",
                template.vectors.len() * 4,
                bits.bytes.len()
            ));
        }
        let levels = self.levels() as f64;
        let dq = |c: &[u8]| u16::from_le_bytes([c[0], c[1]]) as f64 / levels * 2.0 - 1.0;
        let vectors = bits
            .bytes
            .chunks_exact(4)
            .map(|c| Complex64::new(dq(&c[..2]), dq(&c[2..])))
            .collect();
        Ok(CsiSample {
            vectors,
            ..template.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsiDataset {
    pub key: DatasetKey,
    pub params: CsiDatasetParams,
    pub shape: ReShape,
    pub index: Vec<SampleIndex>,
    pub samples: Vec<CsiSample>,
    /// Raw RE responses in the channel export format.
    pub payload: Vec<u8>,
    pub checksum: String,
    pub cache_hit: bool,
}

impl CsiDataset {
    /// Raw response of sample `i`, `(re, tx, rx)`.
    pub fn raw_response(&self, i: usize) -> Vec<Complex32> {
        let n = self.shape.entries_per_sample();
        let body = &self.payload[export::HEADER_LEN..];
        body[i * n * 8..(i + 1) * n * 8]
            .chunks_exact(8)
            .map(|c| {
                Complex32::new(
                    f32::from_le_bytes(c[..4].try_into().expect("4 bytes")),
                    f32::from_le_bytes(c[4..].try_into().expect("4 bytes")),
                )
            })
            .collect()
    }
}

fn samples_from_payload(
    payload: &[u8],
    index: &[SampleIndex],
    subband_size: usize,
) -> Result<(ReShape, Vec<CsiSample>), CsiError> {
    let (shape, values) =
        export::decode(payload).map_err(|e| CsiError::Malformed(e.to_string()))?;
    if shape.samples != index.len() {
        return Err(CsiError::Malformed(format!(
            "{} payload samples vs {} index entries",
            shape.samples,
            index.len()
        )));
    }
    let n = shape.entries_per_sample();
    let num_subbands = shape.num_re.div_ceil(subband_size);
    let samples = index
        .iter()
        .enumerate()
        .map(|(i, ix)| {
            let h: Vec<Complex64> = values[i * n..(i + 1) * n]
                .iter()
                .map(|z| Complex64::new(z.re as f64, z.im as f64))
                .collect();
            let (vectors, flagged) = extract_characteristic(
                &h,
                shape.num_re,
                shape.tx_ports,
                shape.rx_ports,
                subband_size,
            );
            CsiSample {
                tick_index: ix.tick_index,
                user_id: ix.user_id,
                cell_id: ix.cell_id,
                num_subbands,
                tx_ports: shape.tx_ports,
                vectors,
                flagged,
            }
        })
        .collect();
    Ok((shape, samples))
}

/// Fetches the dataset for `params` from `store`, generating and persisting
/// it first on a miss.
pub fn generate_or_fetch(
    params: &CsiDatasetParams,
    store: &DatasetStore,
) -> Result<CsiDataset, CsiError> {
    generate_or_fetch_with(params, store, run_link_channel)
}

/// As [`generate_or_fetch`] with the link-channel run supplied by the caller.
pub fn generate_or_fetch_with(
    params: &CsiDatasetParams,
    store: &DatasetStore,
    simulate: impl FnOnce(&SimRequest) -> Result<SimResult, SimError>,
) -> Result<CsiDataset, CsiError> {
    params.validate()?;
    let key = params.key()?;
    let (payload, index, checksum, cache_hit) = match store.get(&key) {
        Ok(stored) => {
            let index: Vec<SampleIndex> =
                serde_json::from_value(stored.meta.extra["index"].clone())
                    .map_err(|e| CsiError::Malformed(e.to_string()))?;
            (stored.payload, index, stored.meta.checksum, true)
        }
        Err(StoreError::NotFound(_)) => {
            let result = simulate(&params.sim_request(SimMode::LinkChannel))?;
            let SimOutput::LinkChannel(ds) = result.output else {
                return Err(CsiError::Malformed(
                    "simulation returned a non link-channel output".into(),
                ));
            };
            let meta = NewDataset {
                kind: DATASET_KIND.into(),
                params: params.key_document(),
                generator_version: GENERATOR_VERSION.into(),
                extra: json!({
                    "extraction_version": EXTRACTION_VERSION,
                    "shape": ds.shape,
                    "index": ds.samples,
                }),
            };
            let receipt = store.put(&key, meta, &ds.payload)?;
            (ds.payload, ds.samples, receipt.checksum, false)
        }
        Err(e) => return Err(e.into()),
    };
    let (shape, samples) = samples_from_payload(&payload, &index, params.subband_size)?;
    Ok(CsiDataset {
        key,
        params: params.clone(),
        shape,
        index,
        samples,
        payload,
        checksum,
        cache_hit,
    })
}

/// Per-cell KPIs accumulated over a whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunKpi {
    pub cell_id: CellId,
    /// Bytes over the run.
    pub total_dl_traffic: f64,
    /// Mean over scheduled (user, tick) pairs, bits/s.
    pub avg_dl_rate: f64,
    pub avg_bler: f64,
    pub scheduled_user_ticks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiDelta {
    pub cell_id: CellId,
    /// Restored minus ideal.
    pub total_dl_traffic: f64,
    pub avg_dl_rate: f64,
    pub avg_bler: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub nmse: Nmse,
    pub ideal: Vec<RunKpi>,
    pub restored: Vec<RunKpi>,
    pub deltas: Vec<KpiDelta>,
    /// Network-wide mean over scheduled (user, tick) pairs, bits/s.
    pub ideal_avg_dl_rate: f64,
    pub restored_avg_dl_rate: f64,
}

fn aggregate(series: &[PerfIndicators]) -> (Vec<RunKpi>, f64) {
    let Some(first) = series.first() else {
        return (vec![], 0.0);
    };
    let mut out: Vec<RunKpi> = first
        .cells
        .iter()
        .map(|c| RunKpi {
            cell_id: c.cell_id,
            total_dl_traffic: 0.0,
            avg_dl_rate: 0.0,
            avg_bler: 0.0,
            scheduled_user_ticks: 0,
        })
        .collect();
    let mut rate_sums = vec![0.0; out.len()];
    let mut bler_sums = vec![0.0; out.len()];
    for ind in series {
        for (i, c) in ind.cells.iter().enumerate() {
            out[i].total_dl_traffic += c.total_dl_traffic;
            out[i].scheduled_user_ticks += c.scheduled_users;
            rate_sums[i] += c.avg_dl_rate * c.scheduled_users as f64;
            bler_sums[i] += c.avg_bler * c.scheduled_users as f64;
        }
    }
    let mut total_rate = 0.0;
    let mut total_n = 0usize;
    for (i, k) in out.iter_mut().enumerate() {
        if k.scheduled_user_ticks > 0 {
            k.avg_dl_rate = rate_sums[i] / k.scheduled_user_ticks as f64;
            k.avg_bler = bler_sums[i] / k.scheduled_user_ticks as f64;
        }
        total_rate += rate_sums[i];
        total_n += k.scheduled_user_ticks;
    }
    let overall = if total_n > 0 {
        total_rate / total_n as f64
    } else {
        0.0
    };
    (out, overall)
}

fn run_with_gains(
    params: &CsiDatasetParams,
    gains: &HashMap<(u64, UserId, CellId), f64>,
) -> Result<Vec<PerfIndicators>, CsiError> {
    let req = params.sim_request(SimMode::ProtocolStack);
    let mut pipeline = Pipeline::from_request(&req)?;
    Ok((0..req.num_ticks())
        .map(|_| {
            pipeline
                .step_with_signal_gain(Stages::ProtocolStack, |t, u, c| {
                    gains.get(&(t, u, c)).copied().unwrap_or(1.0)
                })
                .indicators
                .expect("protocol-stack stage yields indicators")
        })
        .collect())
}

/// Verification against restored samples supplied directly (e.g. returned
/// by a remote codec), in dataset order.
pub fn system_verify_restored(
    dataset: &CsiDataset,
    restored: &[CsiSample],
) -> Result<VerificationReport, CsiError> {
    let nmse = nmse(&dataset.samples, restored)?;
    let mut ideal_gains = HashMap::new();
    let mut restored_gains = HashMap::new();
    for (x, y) in dataset.samples.iter().zip(restored) {
        let k = (x.tick_index, x.user_id, x.cell_id);
        // the ideal side goes through the same arithmetic so a lossless codec reproduces it bit for bit
        ideal_gains.insert(k, precoding_gain(x, x));
        restored_gains.insert(k, precoding_gain(x, y));
    }
    let (ideal, restored) = rayon::join(
        || run_with_gains(&dataset.params, &ideal_gains),
        || run_with_gains(&dataset.params, &restored_gains),
    );
    let (ideal, ideal_avg_dl_rate) = aggregate(&ideal?);
    let (restored, restored_avg_dl_rate) = aggregate(&restored?);
    let deltas = ideal
        .iter()
        .zip(&restored)
        .map(|(a, b)| KpiDelta {
            cell_id: a.cell_id,
            total_dl_traffic: b.total_dl_traffic - a.total_dl_traffic,
            avg_dl_rate: b.avg_dl_rate - a.avg_dl_rate,
            avg_bler: b.avg_bler - a.avg_bler,
        })
        .collect();
    Ok(VerificationReport {
        nmse,
        ideal,
        restored,
        deltas,
        ideal_avg_dl_rate,
        restored_avg_dl_rate,
    })
}

/// Round-trips every sample through `codec` and verifies the result.
pub fn system_verify(
    dataset: &CsiDataset,
    codec: &dyn Codec,
) -> Result<VerificationReport, CsiError> {
    let restored = restore_all(&dataset.samples, codec)?;
    system_verify_restored(dataset, &restored)
}

pub fn restore_all(samples: &[CsiSample], codec: &dyn Codec) -> Result<Vec<CsiSample>, CsiError> {
    samples
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let bits = codec
                .compress(s)
                .map_err(|message| CsiError::Codec { index, message })?;
            codec
                .decompress(&bits, s)
                .map_err(|message| CsiError::Codec { index, message })
        })
        .collect()
}
