//! Attention-map capture, export, and the quantitative proxies used to
//! compare batch slots: cross-slot feature cosine, threshold-mask IoU
//! and map entropy.
//!
//! Capture is observation-only: recording never mutates a map, and a run
//! with capture enabled produces bit-identical images to one without.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMap, Branch};
use crate::detmath;
use crate::error::{Error, Result};
use crate::guidance::threshold_map;
use crate::tensor::format as tformat;
use crate::tensor::Tensor;

/// One captured attention map with its provenance. The
/// (run, layer, step, slot, branch) tuple is unique within an archive.
#[derive(Debug, Clone)]
pub struct CaptureRecord {
    pub run_id: String,
    pub slot: usize,
    pub map: AttentionMap,
}

impl CaptureRecord {
    pub fn layer_id(&self) -> &str {
        &self.map.layer_id
    }

    pub fn step(&self) -> usize {
        self.map.step
    }

    pub fn branch(&self) -> Branch {
        self.map.branch
    }
}

/// One captured hidden-state tensor (block output) per layer/step/slot.
#[derive(Debug, Clone)]
pub struct FeatureRecord {
    pub run_id: String,
    pub slot: usize,
    pub layer_id: String,
    pub step: usize,
    pub features: Tensor,
}

/// Destination for maps and features emitted by the denoiser.
pub trait Sink {
    fn record_map(&mut self, slot: usize, map: &AttentionMap) -> Result<()>;
    fn record_feature(
        &mut self,
        slot: usize,
        layer_id: &str,
        step: usize,
        features: &Tensor,
    ) -> Result<()>;
}

/// Discards everything.
pub struct NullSink;

impl Sink for NullSink {
    fn record_map(&mut self, _slot: usize, _map: &AttentionMap) -> Result<()> {
        Ok(())
    }

    fn record_feature(&mut self, _: usize, _: &str, _: usize, _: &Tensor) -> Result<()> {
        Ok(())
    }
}

type MapKey = (String, usize, usize, Branch);

/// In-memory capture of one run: every attention map plus the per-block
/// feature trace. Appends with a duplicate key are a logic error.
#[derive(Debug)]
pub struct RunCapture {
    pub run_id: String,
    pub maps: Vec<CaptureRecord>,
    pub features: Vec<FeatureRecord>,
    seen: HashSet<MapKey>,
}

impl RunCapture {
    pub fn new(run_id: impl Into<String>) -> Self {
        RunCapture {
            run_id: run_id.into(),
            maps: Vec::new(),
            features: Vec::new(),
            seen: HashSet::new(),
        }
    }

    pub fn record(&mut self, record: CaptureRecord) -> Result<()> {
        let key = (
            record.layer_id().to_string(),
            record.step(),
            record.slot,
            record.branch(),
        );
        if !self.seen.insert(key) {
            return Err(Error::logic(format!(
                "duplicate capture key {}:{}:{}:{}",
                record.layer_id(),
                record.step(),
                record.slot,
                record.branch()
            )));
        }
        self.maps.push(record);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty() && self.features.is_empty()
    }

    /// Every archived map must be row-stochastic; masked weights are
    /// never archived, so a violation means a mask leaked into capture.
    pub fn audit(&self) -> Result<()> {
        for rec in &self.maps {
            let nkv = rec.map.keys();
            for (r, row) in rec.map.weights.data().chunks(nkv).enumerate() {
                let mut sum = 0.0f64;
                for &w in row {
                    if !(0.0..=1.0).contains(&w) {
                        return Err(Error::logic(format!(
                            "map {}:{} entry {w} outside [0,1]",
                            rec.layer_id(),
                            r
                        )));
                    }
                    sum += w as f64;
                }
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::logic(format!(
                        "map {}:{}:{} slot {} row {r} sums to {sum}",
                        rec.layer_id(),
                        rec.step(),
                        rec.branch(),
                        rec.slot
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes the archive under `dir`: one tensor binary per record plus
    /// a JSON-lines index, and the same for the feature trace.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let maps_dir = dir.join("captures").join("maps");
        fs::create_dir_all(&maps_dir)?;
        let mut index = BufWriter::new(fs::File::create(dir.join("captures").join("index.jsonl"))?);
        for rec in &self.maps {
            let file = format!(
                "{}_{}_s{}_b{}.qkvt",
                rec.layer_id(),
                rec.branch(),
                rec.step(),
                rec.slot
            );
            tformat::save_tensor(&maps_dir.join(&file), &rec.map.weights)?;
            let entry = IndexEntry {
                run: self.run_id.clone(),
                layer: rec.layer_id().to_string(),
                step: rec.step(),
                slot: rec.slot,
                branch: rec.branch(),
                file,
            };
            serde_json::to_writer(&mut index, &entry)
                .map_err(|e| Error::format(e.to_string()))?;
            index.write_all(b"\n")?;
        }
        index.flush()?;

        let feat_dir = dir.join("features");
        fs::create_dir_all(&feat_dir)?;
        let mut findex = BufWriter::new(fs::File::create(feat_dir.join("index.jsonl"))?);
        for rec in &self.features {
            let file = format!("{}_s{}_b{}.qkvt", rec.layer_id, rec.step, rec.slot);
            tformat::save_tensor(&feat_dir.join(&file), &rec.features)?;
            let entry = FeatureIndexEntry {
                run: self.run_id.clone(),
                layer: rec.layer_id.clone(),
                step: rec.step,
                slot: rec.slot,
                file,
            };
            serde_json::to_writer(&mut findex, &entry)
                .map_err(|e| Error::format(e.to_string()))?;
            findex.write_all(b"\n")?;
        }
        findex.flush()?;
        Ok(())
    }

    /// Reads an archive previously written by [`RunCapture::save`].
    pub fn load(dir: &Path) -> Result<RunCapture> {
        let index_path = dir.join("captures").join("index.jsonl");
        let text = fs::read_to_string(&index_path).map_err(|e| {
            Error::input(format!("cannot read {}: {e}", index_path.display()))
        })?;
        let mut capture: Option<RunCapture> = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let entry: IndexEntry =
                serde_json::from_str(line).map_err(|e| Error::format(e.to_string()))?;
            let weights =
                tformat::load_tensor(&dir.join("captures").join("maps").join(&entry.file))?;
            let map = AttentionMap::new(weights, entry.layer.clone(), entry.step, entry.branch)?;
            let cap = capture.get_or_insert_with(|| RunCapture::new(entry.run.clone()));
            cap.record(CaptureRecord {
                run_id: entry.run,
                slot: entry.slot,
                map,
            })?;
        }
        let mut capture = capture.unwrap_or_else(|| RunCapture::new("empty"));

        let findex_path = dir.join("features").join("index.jsonl");
        if let Ok(text) = fs::read_to_string(&findex_path) {
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let entry: FeatureIndexEntry =
                    serde_json::from_str(line).map_err(|e| Error::format(e.to_string()))?;
                let features = tformat::load_tensor(&dir.join("features").join(&entry.file))?;
                capture.features.push(FeatureRecord {
                    run_id: entry.run,
                    slot: entry.slot,
                    layer_id: entry.layer,
                    step: entry.step,
                    features,
                });
            }
        }
        Ok(capture)
    }
}

impl Sink for RunCapture {
    fn record_map(&mut self, slot: usize, map: &AttentionMap) -> Result<()> {
        self.record(CaptureRecord {
            run_id: self.run_id.clone(),
            slot,
            map: map.clone(),
        })
    }

    fn record_feature(
        &mut self,
        slot: usize,
        layer_id: &str,
        step: usize,
        features: &Tensor,
    ) -> Result<()> {
        self.features.push(FeatureRecord {
            run_id: self.run_id.clone(),
            slot,
            layer_id: layer_id.to_string(),
            step,
            features: features.clone(),
        });
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    run: String,
    layer: String,
    step: usize,
    slot: usize,
    branch: Branch,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureIndexEntry {
    run: String,
    layer: String,
    step: usize,
    slot: usize,
    file: String,
}

/// Renders one key's attention column as a grayscale PGM: the Nq-long
/// column (averaged over heads) reshaped to the latent grid and min-max
/// scaled to 8 bits. A constant column renders mid-gray.
pub fn export_map_image(record: &CaptureRecord, key_index: usize, path: &Path) -> Result<()> {
    let bytes = map_column_bytes(&record.map, key_index)?;
    let side = (bytes.len() as f64).sqrt() as usize;
    let mut w = BufWriter::new(fs::File::create(path)?);
    crate::imageio::write_pgm(&mut w, side, side, &bytes)?;
    w.flush()?;
    Ok(())
}

/// The 8-bit min-max scaled column for one key index, head-averaged.
pub fn map_column_bytes(map: &AttentionMap, key_index: usize) -> Result<Vec<u8>> {
    if key_index >= map.keys() {
        return Err(Error::input(format!(
            "key index {key_index} out of range (Nkv = {})",
            map.keys()
        )));
    }
    let (heads, nq, nkv) = (map.heads(), map.queries(), map.keys());
    let side = (nq as f64).sqrt() as usize;
    if side * side != nq {
        return Err(Error::input(format!(
            "query count {nq} is not a square grid"
        )));
    }
    let mut column = vec![0.0f64; nq];
    for h in 0..heads {
        for q in 0..nq {
            column[q] += map.weights.data()[h * nq * nkv + q * nkv + key_index] as f64;
        }
    }
    let inv = 1.0 / heads as f64;
    column.iter_mut().for_each(|v| *v *= inv);
    let min = column.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bytes: Vec<u8> = if max > min {
        let span = max - min;
        column
            .iter()
            .map(|&v| ((v - min) / span * 255.0 + 0.5).floor() as u8)
            .collect()
    } else {
        vec![128u8; nq]
    };
    Ok(bytes)
}

/// Shannon entropy (nats) of one probability row.
pub fn row_entropy(row: &[f32]) -> f64 {
    let mut h = 0.0f64;
    for &p in row {
        if p > 0.0 {
            let p = p as f64;
            h -= p * detmath::ln(p);
        }
    }
    h
}

/// Mean row entropy of a stacked map.
pub fn map_entropy(map: &AttentionMap) -> f64 {
    let nkv = map.keys();
    let rows = map.weights.len() / nkv;
    let total: f64 = map
        .weights
        .data()
        .chunks(nkv)
        .map(row_entropy)
        .sum();
    total / rows as f64
}

/// IoU of the two threshold masks cut from a pair of maps at `tau`.
/// Both masks empty counts as full overlap.
pub fn mask_iou(a: &AttentionMap, b: &AttentionMap, tau: f32) -> Result<f64> {
    if a.weights.shape() != b.weights.shape() {
        return Err(Error::ShapeMismatch {
            op: "mask_iou",
            left: a.weights.shape().to_vec(),
            right: b.weights.shape().to_vec(),
        });
    }
    let ma = threshold_map(a, tau)?;
    let mb = threshold_map(b, tau)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in ma.mask.data().iter().zip(mb.mask.data()) {
        let (x, y) = (*x > 0.5, *y > 0.5);
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Cosine similarity of two flattened tensors, f64 accumulation.
pub fn feature_cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "feature_cosine",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        dot += (x as f64) * (y as f64);
        na += (x as f64) * (x as f64);
        nb += (y as f64) * (y as f64);
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Per-layer cross-slot feature cosine, averaged over steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCosine {
    pub layer_id: String,
    pub cosine: f64,
}

/// Per layer+branch cross-slot mask IoU at the report's tau.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapOverlap {
    pub layer_id: String,
    pub branch: Branch,
    pub iou: f64,
}

/// Per layer+branch mean map entropy (nats), both slots pooled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapEntropyStat {
    pub layer_id: String,
    pub branch: Branch,
    pub entropy: f64,
}

/// Quantitative cross-slot consistency proxies for one captured run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Threshold used for the IoU masks.
    pub tau_mode: String,
    pub feature_cosine: Vec<LayerCosine>,
    /// Headline number: the mid block's cross-slot feature cosine.
    pub mid_block_cosine: f64,
    pub map_iou: Vec<MapOverlap>,
    pub map_entropy: Vec<MapEntropyStat>,
}

/// Computes the consistency proxies between batch slots 0 and 1.
/// Every compared (layer, step) must be present for both slots.
pub fn consistency_metrics(capture: &RunCapture, tau: Option<f32>) -> Result<ConsistencyReport> {
    // Pair features by (layer, step).
    let mut by_key: BTreeMap<(String, usize), [Option<&FeatureRecord>; 2]> = BTreeMap::new();
    for rec in &capture.features {
        if rec.slot > 1 {
            continue;
        }
        by_key
            .entry((rec.layer_id.clone(), rec.step))
            .or_insert([None, None])[rec.slot] = Some(rec);
    }
    let mut cos_by_layer: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for ((layer, step), pair) in &by_key {
        let (a, b) = match pair {
            [Some(a), Some(b)] => (a, b),
            _ => {
                return Err(Error::input(format!(
                    "feature record {layer} step {step} missing one slot"
                )))
            }
        };
        let c = feature_cosine(&a.features, &b.features)?;
        let e = cos_by_layer.entry(layer.clone()).or_insert((0.0, 0));
        e.0 += c;
        e.1 += 1;
    }
    let feature_cosine: Vec<LayerCosine> = cos_by_layer
        .iter()
        .map(|(layer_id, (sum, n))| LayerCosine {
            layer_id: layer_id.clone(),
            cosine: sum / *n as f64,
        })
        .collect();
    let mid_block_cosine = feature_cosine
        .iter()
        .find(|l| l.layer_id == "mid")
        .map(|l| l.cosine)
        .unwrap_or(0.0);

    // Pair maps by (layer, branch, step).
    let mut maps_by_key: BTreeMap<(String, String, usize), [Option<&CaptureRecord>; 2]> =
        BTreeMap::new();
    for rec in &capture.maps {
        if rec.slot > 1 {
            continue;
        }
        maps_by_key
            .entry((
                rec.layer_id().to_string(),
                rec.branch().to_string(),
                rec.step(),
            ))
            .or_insert([None, None])[rec.slot] = Some(rec);
    }
    let mut iou_by_lb: BTreeMap<(String, Branch), (f64, usize)> = BTreeMap::new();
    let mut ent_by_lb: BTreeMap<(String, Branch), (f64, usize)> = BTreeMap::new();
    for ((layer, _bname, step), pair) in &maps_by_key {
        let (a, b) = match pair {
            [Some(a), Some(b)] => (a, b),
            _ => {
                return Err(Error::input(format!(
                    "map record {layer} step {step} missing one slot"
                )))
            }
        };
        let t = tau.unwrap_or(1.0 / a.map.keys() as f32);
        let iou = mask_iou(&a.map, &b.map, t)?;
        let e = iou_by_lb
            .entry((layer.clone(), a.branch()))
            .or_insert((0.0, 0));
        e.0 += iou;
        e.1 += 1;
        let ent = ent_by_lb
            .entry((layer.clone(), a.branch()))
            .or_insert((0.0, 0));
        ent.0 += map_entropy(&a.map) + map_entropy(&b.map);
        ent.1 += 2;
    }
    let map_iou = iou_by_lb
        .iter()
        .map(|((layer_id, branch), (sum, n))| MapOverlap {
            layer_id: layer_id.clone(),
            branch: *branch,
            iou: sum / *n as f64,
        })
        .collect();
    let map_entropy = ent_by_lb
        .iter()
        .map(|((layer_id, branch), (sum, n))| MapEntropyStat {
            layer_id: layer_id.clone(),
            branch: *branch,
            entropy: sum / *n as f64,
        })
        .collect();

    Ok(ConsistencyReport {
        tau_mode: match tau {
            Some(t) => format!("{t}"),
            None => "uniform (1/Nkv)".to_string(),
        },
        feature_cosine,
        mid_block_cosine,
        map_iou,
        map_entropy,
    })
}

/// Directory of one archived run: `<root>/<run_id>`.
pub fn run_dir(root: &Path, run_id: &str) -> PathBuf {
    root.join(run_id)
}

/// Loads a single record from an archive without reading every tensor.
/// A missing key is an input error that lists the available layer ids.
pub fn load_record(
    dir: &Path,
    layer: &str,
    step: usize,
    slot: usize,
    branch: Branch,
) -> Result<CaptureRecord> {
    let index_path = dir.join("captures").join("index.jsonl");
    let text = fs::read_to_string(&index_path)
        .map_err(|e| Error::input(format!("cannot read {}: {e}", index_path.display())))?;
    let mut layers: BTreeMap<String, ()> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let entry: IndexEntry =
            serde_json::from_str(line).map_err(|e| Error::format(e.to_string()))?;
        layers.insert(entry.layer.clone(), ());
        if entry.layer == layer && entry.step == step && entry.slot == slot
            && entry.branch == branch
        {
            let weights =
                tformat::load_tensor(&dir.join("captures").join("maps").join(&entry.file))?;
            let map = AttentionMap::new(weights, entry.layer, entry.step, entry.branch)?;
            return Ok(CaptureRecord {
                run_id: entry.run,
                slot: entry.slot,
                map,
            });
        }
    }
    let available: Vec<String> = layers.into_keys().collect();
    Err(Error::input(format!(
        "no record {layer}:{step}:{branch} slot {slot}; available layers: {}",
        available.join(", ")
    )))
}
