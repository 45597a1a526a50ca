//! Analytic parameter and multiply-accumulate accounting.
//!
//! "FLOPs" follow the video-recognition convention: one multiply-accumulate
//! counts once, so `gflops = macs / 1e9`. Pooling, identity, zero and batch
//! norm cost no MACs; an affine batch norm holds `2·C` parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StackPlan;
use crate::net::{plan_cells, NetConfig};
use crate::ops::{strided_shape, OpKind, Stride, UNIT_STRIDE};
use crate::space::{validate_genotype, Genotype};
use crate::tensor::Shape;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCost {
    pub params: u64,
    pub macs: u64,
}

impl std::ops::Add for OpCost {
    type Output = OpCost;

    fn add(self, o: OpCost) -> OpCost {
        OpCost {
            params: self.params + o.params,
            macs: self.macs + o.macs,
        }
    }
}

impl std::iter::Sum for OpCost {
    fn sum<I: Iterator<Item = OpCost>>(iter: I) -> OpCost {
        iter.fold(OpCost::default(), |a, b| a + b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

/// Network totals with a stem / per-cell / head breakdown whose entries sum
/// to the totals.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub macs: u64,
    pub per_cell: Vec<CostEntry>,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.macs as f64 / 1e9
    }

    /// `{"params", "macs", "gflops", "per_cell"}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "params": self.params,
            "macs": self.macs,
            "gflops": self.gflops(),
            "per_cell": self.per_cell,
        })
    }
}

fn volume(s: Shape) -> u64 {
    (s[0] * s[2] * s[3] * s[4]) as u64
}

fn conv_cost(c_in: usize, c_out: usize, groups: usize, kvol: usize, out: Shape) -> OpCost {
    let params = (c_out * (c_in / groups) * kvol) as u64;
    OpCost {
        params,
        macs: params * volume(out),
    }
}

fn bn_cost(c: usize, affine: bool) -> OpCost {
    OpCost {
        params: if affine { 2 * c as u64 } else { 0 },
        macs: 0,
    }
}

/// Cost of one candidate op applied to `input` (`[N, C, T, H, W]`).
pub fn op_cost(kind: OpKind, c: usize, stride: Stride, input: Shape, affine: bool) -> OpCost {
    let out = strided_shape(input, stride);
    match kind {
        OpKind::Zero => OpCost::default(),
        OpKind::Identity if stride == UNIT_STRIDE => OpCost::default(),
        // Two strided 1×1×1 halves adding up to C output channels.
        OpKind::Identity => conv_cost(c, c, 1, 1, out) + bn_cost(c, affine),
        OpKind::AvgPool1x3x3 => bn_cost(c, affine),
        OpKind::MaxPool1x3x3 => OpCost::default(),
        OpKind::SepConv1x3x3 | OpKind::DilSepConv1x3x3 => {
            conv_cost(c, c, c, 9, out) + conv_cost(c, c, 1, 1, out) + bn_cost(c, affine)
        }
        OpKind::TConv3_3x3 | OpKind::TConv3_1x1 => {
            let k2 = if kind == OpKind::TConv3_3x3 { 9 } else { 1 };
            let mid = strided_shape(input, [1, stride[1], stride[2]]);
            conv_cost(c, c, 1, k2, mid) + conv_cost(c, c, 1, 3, out) + bn_cost(c, affine)
        }
    }
}

/// Analytic cost of the discrete network `build_discrete` would produce.
/// The plan's `c0` overrides `cfg.c0`.
pub fn network_cost(genotype: &Genotype, plan: &StackPlan, input: Shape, cfg: &NetConfig) -> Result<CostReport> {
    let violations = validate_genotype(genotype);
    if !violations.is_empty() {
        return Err(Error::invalid(format!("invalid genotype: {}", violations.join("; "))));
    }
    let cfg = NetConfig {
        c0: plan.c0,
        ..cfg.clone()
    };
    let slots = plan_cells(&plan.cells(), input, &cfg)?;
    let n = input[0];
    let at = |c: usize, e: [usize; 3]| -> Shape { [n, c, e[0], e[1], e[2]] };
    let mut entries = Vec::with_capacity(slots.len() + 2);

    let stem_ext = [input[2], input[3], input[4]];
    let stem = conv_cost(input[1], cfg.c0, 1, 9, at(cfg.c0, stem_ext)) + bn_cost(cfg.c0, true);
    entries.push(("stem".to_string(), stem));

    for (k, slot) in slots.iter().enumerate() {
        let c = slot.channels;
        // Both preprocessing convs emit the resolution of the newer input.
        let mut cost = conv_cost(slot.in_channels[0], c, 1, 1, at(c, slot.in_extent))
            + bn_cost(c, cfg.affine)
            + conv_cost(slot.in_channels[1], c, 1, 1, at(c, slot.in_extent))
            + bn_cost(c, cfg.affine);
        let cell = genotype.cell(slot.category);
        if cell.n_intermediate() != cfg.n_intermediate {
            return Err(Error::invalid(format!("{} genotype does not match the network node count", slot.category)));
        }
        for (_, gene) in cell.genes() {
            let stride = if gene.from < 2 { slot.stride } else { UNIT_STRIDE };
            let input_extent = if gene.from < 2 { slot.in_extent } else { slot.out_extent };
            cost = cost + op_cost(gene.op, c, stride, at(c, input_extent), cfg.affine);
        }
        entries.push((format!("cell{k}:{}", slot.category.key()), cost));
    }

    let last = slots.last().expect("plan is non-empty").out_channels;
    let fc = (last * cfg.n_classes) as u64;
    entries.push((
        "head".to_string(),
        OpCost {
            params: fc,
            macs: fc * n as u64,
        },
    ));

    let total: OpCost = entries.iter().map(|e| e.1).sum();
    Ok(CostReport {
        params: total.params,
        macs: total.macs,
        per_cell: entries
            .into_iter()
            .map(|(name, c)| CostEntry {
                name,
                params: c.params,
                macs: c.macs,
            })
            .collect(),
    })
}

/// Rounds the shortest decimal form of `x` to two places, ties away from
/// zero.
pub fn round_half_up_2(x: f64) -> String {
    let neg = x < 0.0;
    let s = format!("{}", x.abs());
    let (int, frac) = s.split_once('.').unwrap_or((&s, ""));
    let mut digits: Vec<u8> = int.bytes().chain(frac.bytes().chain(std::iter::repeat(b'0')).take(2)).collect();
    if frac.as_bytes().get(2).is_some_and(|&d| d >= b'5') {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, b'1');
                break;
            }
            i -= 1;
            if digits[i] == b'9' {
                digits[i] = b'0';
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - 2;
    let body = format!(
        "{}.{}",
        std::str::from_utf8(&digits[..split]).expect("ascii"),
        std::str::from_utf8(&digits[split..]).expect("ascii")
    );
    if neg && body.bytes().any(|b| b.is_ascii_digit() && b != b'0') {
        format!("-{body}")
    } else {
        body
    }
}

/// `"<per-view GFLOPs> × <views>"`.
pub fn report_views(gflops: f64, n_views: usize) -> Result<String> {
    if n_views == 0 {
        return Err(Error::invalid("at least one view is required"));
    }
    Ok(format!("{} × {n_views}", round_half_up_2(gflops)))
}
