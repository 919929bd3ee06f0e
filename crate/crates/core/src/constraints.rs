//! Cross-attention map constraints tying entity attention to entity masks.

use autograd::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionRecord, AttnCapture};
use crate::conditioning::ConditioningBundle;
use crate::{Error, Result};

/// Cross-attention layers (by id) whose maps enter the constraints: the two
/// coarsest stages.
pub const CONSTRAINED_LAYERS: [usize; 2] = [0, 1];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintWeights {
    pub lambda_tcac: f64,
    pub lambda_icac: f64,
}

impl Default for ConstraintWeights {
    fn default() -> Self {
        Self {
            lambda_tcac: 1e-3,
            lambda_icac: 1e-3,
        }
    }
}

impl ConstraintWeights {
    pub const ZERO: Self = Self {
        lambda_tcac: 0.0,
        lambda_icac: 0.0,
    };
}

/// Binary entity masks sharing one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityMaskSet {
    pub masks: Vec<Tensor>,
    pub h: usize,
    pub w: usize,
}

impl EntityMaskSet {
    pub fn new(masks: Vec<Tensor>) -> Result<Self> {
        let (h, w) = match masks.first() {
            Some(m) if m.shape().len() == 2 => (m.shape()[0], m.shape()[1]),
            Some(m) => return Err(Error::invalid(format!("mask shape {:?} is not 2-D", m.shape()))),
            None => (0, 0),
        };
        if masks.iter().any(|m| m.shape() != [h, w]) {
            return Err(Error::invalid("entity masks differ in size"));
        }
        Ok(Self { masks, h, w })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn downsample(&self, target: (usize, usize)) -> Result<Self> {
        Self::new(self.masks.iter().map(|m| downsample_mask(m, target)).collect::<Result<_>>()?)
    }
}

/// Area-average pooling to `target` followed by `≥ 0.5` thresholding.
pub fn downsample_mask(mask: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let s = mask.shape();
    let (h, w) = target;
    if s.len() != 2 || h == 0 || w == 0 || s[0] % h != 0 || s[1] % w != 0 {
        return Err(Error::invalid(format!("cannot pool mask {s:?} to {h}x{w}")));
    }
    let (fy, fx) = (s[0] / h, s[1] / w);
    let area = (fy * fx) as f64;
    Ok(Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        let mut sum = 0.0;
        for dy in 0..fy {
            for dx in 0..fx {
                sum += mask.get2(y * fy + dy, x * fx + dx);
            }
        }
        if sum / area >= 0.5 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Mean over records and heads of the text-probability column at
/// `entity_token_pos`, reshaped to the records' grid.
pub fn aggregate_entity_attention(records: &[AttentionRecord], entity_token_pos: usize) -> Result<Tensor> {
    aggregate_columns(records, |r| Some(&r.text_maps), &[entity_token_pos])
}

/// Same as [`aggregate_entity_attention`] over the subject-token columns
/// `tokens` of the image branch (averaged over those tokens too).
pub fn aggregate_subject_attention(records: &[AttentionRecord], tokens: &[usize]) -> Result<Tensor> {
    aggregate_columns(records, |r| r.image_maps.as_ref(), tokens)
}

fn aggregate_columns<'a>(
    records: &'a [AttentionRecord],
    maps: impl Fn(&'a AttentionRecord) -> Option<&'a Tensor>,
    cols: &[usize],
) -> Result<Tensor> {
    let first = records.first().ok_or_else(|| Error::invalid("no attention records"))?;
    let (h, w) = first.grid;
    let mut acc = vec![0.0; h * w];
    let mut count = 0usize;
    for r in records {
        if r.grid != first.grid {
            return Err(Error::invalid(format!("records mix grids {:?} and {:?}", first.grid, r.grid)));
        }
        let m = maps(r).ok_or_else(|| Error::invalid("record has no subject-branch maps"))?;
        let (heads, q, tokens) = (m.shape()[0], m.shape()[1], m.shape()[2]);
        if q != h * w {
            return Err(Error::invalid(format!("{q} queries on a {h}x{w} grid")));
        }
        for &c in cols {
            if c >= tokens {
                return Err(Error::invalid(format!("token {c} out of range for {tokens} tokens")));
            }
            for hd in 0..heads {
                for (i, a) in acc.iter_mut().enumerate() {
                    *a += m.data()[(hd * q + i) * tokens + c];
                }
            }
            count += heads;
        }
    }
    Ok(Tensor::new(&[h, w], acc.into_iter().map(|v| v / count as f64).collect())?)
}

/// On-tape mean over captures and heads of the probability columns `cols`
/// of one branch; `[queries × 1]`.
pub fn aggregate_capture_columns<'t>(caps: &[&AttnCapture<'t>], image: bool, cols: &[usize]) -> Result<Var<'t>> {
    let mut terms = Vec::new();
    for cap in caps {
        let heads = if image { &cap.image } else { &cap.text };
        for h in heads {
            for &c in cols {
                terms.push(h.slice_cols(c, 1)?);
            }
        }
    }
    let n = terms.len();
    let first = *terms.first().ok_or_else(|| Error::invalid("no attention maps to aggregate"))?;
    let mut sum = first;
    for t in &terms[1..] {
        sum = sum.add(*t)?;
    }
    Ok(sum.scale(1.0 / n as f64)?)
}

fn check_count(maps: usize, masks: &EntityMaskSet) -> Result<()> {
    if maps != masks.len() {
        return Err(Error::invalid(format!("{maps} maps for {} masks", masks.len())));
    }
    if maps == 0 {
        return Err(Error::invalid("constraint needs at least one entity"));
    }
    Ok(())
}

fn l1_to_mask<'t>(map: Var<'t>, mask: &Tensor) -> Result<Var<'t>> {
    if map.value().numel() != mask.numel() {
        return Err(Error::invalid(format!("map {:?} vs mask {:?}", map.shape(), mask.shape())));
    }
    let target = map.tape().constant(mask.clone().reshape(&map.shape())?);
    Ok(map.mean_abs_diff(target)?)
}

/// `(1/N) Σ_i mean|A_i − M_i|`.
pub fn tcac_loss<'t>(entity_maps: &[Var<'t>], masks: &EntityMaskSet) -> Result<Var<'t>> {
    check_count(entity_maps.len(), masks)?;
    let mut total: Option<Var<'t>> = None;
    for (m, mask) in entity_maps.iter().zip(&masks.masks) {
        let l = l1_to_mask(*m, mask)?;
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / entity_maps.len() as f64)?)
}

/// `(1/(M·N)) Σ_i Σ_j mean|A_ij − M_i|` with `subject_maps[i][j]` the map
/// of subject token `j` of entity `i`.
pub fn icac_loss<'t>(subject_maps: &[Vec<Var<'t>>], masks: &EntityMaskSet) -> Result<Var<'t>> {
    check_count(subject_maps.len(), masks)?;
    let m = subject_maps[0].len();
    if m == 0 || subject_maps.iter().any(|s| s.len() != m) {
        return Err(Error::invalid("every entity needs the same positive number of subject maps"));
    }
    let mut total: Option<Var<'t>> = None;
    for (maps, mask) in subject_maps.iter().zip(&masks.masks) {
        for map in maps {
            let l = l1_to_mask(*map, mask)?;
            total = Some(match total {
                Some(t) => t.add(l)?,
                None => l,
            });
        }
    }
    Ok(total.expect("non-empty").scale(1.0 / (m * subject_maps.len()) as f64)?)
}

/// `l_sd + λ_tcac·l_tcac + λ_icac·l_icac`; zero-weighted terms are left out.
pub fn total_loss<'t>(l_sd: Var<'t>, l_tcac: Option<Var<'t>>, l_icac: Option<Var<'t>>, w: ConstraintWeights) -> Result<Var<'t>> {
    let mut total = l_sd;
    if let Some(l) = l_tcac.filter(|_| w.lambda_tcac != 0.0) {
        total = total.add(l.scale(w.lambda_tcac)?)?;
    }
    if let Some(l) = l_icac.filter(|_| w.lambda_icac != 0.0) {
        total = total.add(l.scale(w.lambda_icac)?)?;
    }
    Ok(total)
}

/// Constraint terms of one forward pass, each averaged over the constrained
/// stages that have at least one eligible entity.
pub struct ConstraintTerms<'t> {
    pub tcac: Option<Var<'t>>,
    pub icac: Option<Var<'t>>,
}

/// Builds both constraints from recorded captures. Entities that were
/// dropped, or whose mask vanishes at a stage's resolution, are left out of
/// that stage.
pub fn constraint_terms<'t>(caps: &[AttnCapture<'t>], cond: &ConditioningBundle<'t>, layers: &[usize]) -> Result<ConstraintTerms<'t>> {
    if cond.masks.len() != cond.entities.len() {
        return Err(Error::invalid(format!(
            "{} masks for {} entities",
            cond.masks.len(),
            cond.entities.len()
        )));
    }
    let full = EntityMaskSet::new(cond.masks.clone())?;
    let (mut tcac, mut icac) = (Vec::new(), Vec::new());
    for &layer in layers {
        let stage: Vec<&AttnCapture<'t>> = caps.iter().filter(|c| c.layer_id == layer).collect();
        let Some(grid) = stage.first().map(|c| c.grid) else {
            continue;
        };
        let small = full.downsample(grid)?;
        let (mut tmaps, mut tmasks, mut imaps, mut imasks) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (e, mask) in cond.entities.iter().zip(small.masks) {
            let Some(rows) = &e.subject_rows else { continue };
            if mask.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            tmaps.push(aggregate_capture_columns(&stage, false, &[e.token_pos])?);
            tmasks.push(mask.clone());
            let per_token = rows
                .clone()
                .map(|j| aggregate_capture_columns(&stage, true, &[j]))
                .collect::<Result<Vec<_>>>()?;
            imaps.push(per_token);
            imasks.push(mask);
        }
        if !tmaps.is_empty() {
            tcac.push(tcac_loss(&tmaps, &EntityMaskSet::new(tmasks)?)?);
            icac.push(icac_loss(&imaps, &EntityMaskSet::new(imasks)?)?);
        }
    }
    let mean = |v: Vec<Var<'t>>| -> Result<Option<Var<'t>>> {
        let n = v.len();
        let mut it = v.into_iter();
        let Some(mut acc) = it.next() else { return Ok(None) };
        for x in it {
            acc = acc.add(x)?;
        }
        Ok(Some(acc.scale(1.0 / n as f64)?))
    };
    Ok(ConstraintTerms {
        tcac: mean(tcac)?,
        icac: mean(icac)?,
    })
}

/// 8-bit binary graymap of a map, min–max normalised (constant maps are
/// written as zeros).
pub fn heatmap_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::invalid(format!("heatmap needs a 2-D map, got {s:?}")));
    }
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    Ok(crate::imageio::encode_pgm(s[1], s[0], &pixels))
}
