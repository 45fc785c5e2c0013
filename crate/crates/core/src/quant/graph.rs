//! Serialized fused network (topology + int8 weights + quantization
//! parameters) and the simulated integer inference path.
//!
//! Binary format (all integers little-endian):
//!
//! ```text
//! magic "QSR1" | version u32 | layer count u32 | input scale f32 | input zp i32
//! per layer:
//!   op tag u8     1 = conv, 2 = skip-add, 3 = pixel-shuffle
//!   flags u8      bit0 output qparams present, bit1 weights present,
//!                 bit2 ReLU after conv, bit3 per-channel weight scales
//!   shape 4xu32   conv: weight shape (Cout, Cin, k, k);
//!                 skip-add: (tap layer index, 0, 0, 0);
//!                 pixel-shuffle: (r, 0, 0, 0)
//!   [bit0] out scale f32, out zero-point i32
//!   [bit1] weight scales Cout x f32, raw weight bytes prod(shape) x i8,
//!          bias Cout x i32
//! crc32 u32 over everything above, including the magic
//! ```
//!
//! Integer execution: int8 weights times zero-point-corrected uint8
//! activations accumulate in i32, the i32 bias (scale `s_in * s_w`) is
//! added, and the accumulator is requantized with the f64 multiplier
//! `s_in * s_w / s_out` under round-half-even. ReLU clamps at the output
//! zero point. The skip addition requantizes both addends to the output
//! node's parameters before adding. Values stay quantized end to end;
//! dequantization happens only at the API boundary.

use super::{quantize_value, Granularity, QatModel, Phase, QuantParams, ACT_QMAX, ACT_QMIN, WEIGHT_QMAX, WEIGHT_QMIN};
use crate::container::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub const GRAPH_MAGIC: &[u8; 4] = b"QSR1";
pub const GRAPH_VERSION: u32 = 1;

const FLAG_HAS_QP: u8 = 0x01;
const FLAG_HAS_WEIGHT: u8 = 0x02;
const FLAG_RELU: u8 = 0x04;
const FLAG_PER_CHANNEL: u8 = 0x08;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GraphOp {
    Conv { relu: bool },
    /// Adds the output of layer `tap` to the previous layer's output.
    SkipAdd { tap: usize },
    PixelShuffle { r: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphLayer {
    pub op: GraphOp,
    pub weight_shape: [usize; 4],
    /// Output activation parameters (absent for pixel-shuffle, which
    /// passes quantized values through unchanged).
    pub out_qp: Option<QuantParams>,
    /// Per-output-channel weight scales (conv only).
    pub weight_scales: Vec<f32>,
    pub weight: Vec<i8>,
    pub bias: Vec<i32>,
}

/// The export artifact: fused topology, int8 weights, int32 biases, and
/// every quantization parameter needed for integer execution.
#[derive(Debug, Clone, PartialEq)]
pub struct DeployGraph {
    pub input_scale: f32,
    pub input_zp: i32,
    pub layers: Vec<GraphLayer>,
}

/// Quantized uint8 activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub shape: [usize; 4],
    pub data: Vec<u8>,
}

impl QTensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

fn act_qp(scale: f32, zp: i32) -> QuantParams {
    QuantParams {
        scales: vec![scale],
        zero_point: zp,
        qmin: ACT_QMIN,
        qmax: ACT_QMAX,
        granularity: Granularity::PerTensor,
    }
}

/// Materializes the frozen QAT model as a deploy graph. Requires phase 3:
/// the quantization grid must be final before weights are committed to
/// int8.
pub fn export_graph(q: &QatModel) -> Result<DeployGraph> {
    if q.phase != Phase::Three {
        return Err(Error::invalid_state(format!(
            "export requires the phase-3 frozen model, current phase is {}",
            q.phase.number()
        )));
    }
    let input_qp = q
        .input_node
        .qp
        .as_ref()
        .ok_or_else(|| Error::invalid_state("input node is not calibrated"))?;

    let mut layers = Vec::new();
    let mut in_scale = input_qp.scale();

    fn push_conv(
        layers: &mut Vec<GraphLayer>,
        conv: &crate::tensor::ConvParams,
        w_node: &super::WeightNode,
        out_node: &super::ActNode,
        relu: bool,
        in_scale: &mut f32,
    ) -> Result<()> {
        let wqp = w_node
            .qp
            .as_ref()
            .ok_or_else(|| Error::invalid_state("weight node is not calibrated"))?;
        let oqp = out_node
            .qp
            .as_ref()
            .ok_or_else(|| Error::invalid_state("activation node is not calibrated"))?;
        let [c_out, c_in, kh, kw] = conv.weight.shape();
        let row = c_in * kh * kw;
        let mut weight = vec![0i8; c_out * row];
        let mut bias = vec![0i32; c_out];
        for oc in 0..c_out {
            let s = wqp.scales[oc];
            for i in 0..row {
                let (qv, _) = quantize_value(conv.weight.data()[oc * row + i], s, 0, WEIGHT_QMIN, WEIGHT_QMAX);
                weight[oc * row + i] = qv as i8;
            }
            let bscale = f64::from(*in_scale) * f64::from(s);
            bias[oc] = (f64::from(conv.bias.data()[oc]) / bscale).round_ties_even() as i32;
        }
        layers.push(GraphLayer {
            op: GraphOp::Conv { relu },
            weight_shape: [c_out, c_in, kh, kw],
            out_qp: Some(oqp.clone()),
            weight_scales: wqp.scales.clone(),
            weight,
            bias,
        });
        *in_scale = oqp.scale();
        Ok(())
    }

    push_conv(&mut layers, &q.model.stem, &q.stem_w, &q.stem_out, false, &mut in_scale)?;
    let stem_layer = 0usize;
    for i in 0..q.model.blocks.len() {
        push_conv(
            &mut layers,
            &q.model.blocks[i],
            &q.block_w[i],
            &q.block_out[i],
            true,
            &mut in_scale,
        )?;
    }
    let skip_qp = q
        .skip_out
        .qp
        .as_ref()
        .ok_or_else(|| Error::invalid_state("skip node is not calibrated"))?;
    layers.push(GraphLayer {
        op: GraphOp::SkipAdd { tap: stem_layer },
        weight_shape: [stem_layer, 0, 0, 0],
        out_qp: Some(skip_qp.clone()),
        weight_scales: Vec::new(),
        weight: Vec::new(),
        bias: Vec::new(),
    });
    in_scale = skip_qp.scale();
    push_conv(&mut layers, &q.model.head, &q.head_w, &q.head_out, false, &mut in_scale)?;
    layers.push(GraphLayer {
        op: GraphOp::PixelShuffle { r: crate::model::SCALE },
        weight_shape: [crate::model::SCALE, 0, 0, 0],
        out_qp: None,
        weight_scales: Vec::new(),
        weight: Vec::new(),
        bias: Vec::new(),
    });

    Ok(DeployGraph {
        input_scale: input_qp.scale(),
        input_zp: input_qp.zero_point,
        layers,
    })
}

impl DeployGraph {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(GRAPH_MAGIC, GRAPH_VERSION);
        w.put_u32(self.layers.len() as u32);
        w.put_f32(self.input_scale);
        w.put_i32(self.input_zp);
        for layer in &self.layers {
            let (tag, relu) = match layer.op {
                GraphOp::Conv { relu } => (1u8, relu),
                GraphOp::SkipAdd { .. } => (2, false),
                GraphOp::PixelShuffle { .. } => (3, false),
            };
            let mut flags = 0u8;
            if layer.out_qp.is_some() {
                flags |= FLAG_HAS_QP;
            }
            if !layer.weight.is_empty() {
                flags |= FLAG_HAS_WEIGHT | FLAG_PER_CHANNEL;
            }
            if relu {
                flags |= FLAG_RELU;
            }
            w.put_u8(tag);
            w.put_u8(flags);
            for d in layer.weight_shape {
                w.put_u32(d as u32);
            }
            if let Some(qp) = &layer.out_qp {
                w.put_f32(qp.scale());
                w.put_i32(qp.zero_point);
            }
            if !layer.weight.is_empty() {
                w.put_f32_slice(&layer.weight_scales);
                w.put_bytes(&layer.weight.iter().map(|&v| v as u8).collect::<Vec<u8>>());
                w.put_i32_slice(&layer.bias);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, GRAPH_MAGIC, GRAPH_VERSION)?;
        let count = r.get_u32()? as usize;
        let input_scale = r.get_f32()?;
        let input_zp = r.get_i32()?;
        let mut layers = Vec::with_capacity(count);
        for li in 0..count {
            let at = r.offset();
            let tag = r.get_u8()?;
            let flags = r.get_u8()?;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.get_u32()? as usize;
            }
            let out_qp = if flags & FLAG_HAS_QP != 0 {
                let scale = r.get_f32()?;
                let zp = r.get_i32()?;
                Some(act_qp(scale, zp))
            } else {
                None
            };
            let (weight_scales, weight, bias) = if flags & FLAG_HAS_WEIGHT != 0 {
                let c_out = shape[0];
                let numel = shape.iter().product::<usize>();
                let scales = r.get_f32_vec(c_out)?;
                let wb = r.get_bytes(numel)?;
                let weight: Vec<i8> = wb.iter().map(|&b| b as i8).collect();
                let bias = r.get_i32_vec(c_out)?;
                (scales, weight, bias)
            } else {
                (Vec::new(), Vec::new(), Vec::new())
            };
            let op = match tag {
                1 => GraphOp::Conv {
                    relu: flags & FLAG_RELU != 0,
                },
                2 => GraphOp::SkipAdd { tap: shape[0] },
                3 => GraphOp::PixelShuffle { r: shape[0] },
                other => {
                    return Err(Error::Parse {
                        offset: at,
                        msg: format!("unknown op tag {other} in layer {li}"),
                    })
                }
            };
            layers.push(GraphLayer {
                op,
                weight_shape: shape,
                out_qp,
                weight_scales,
                weight,
                bias,
            });
        }
        r.expect_end()?;
        Ok(DeployGraph {
            input_scale,
            input_zp,
            layers,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Output activation parameters of the graph (the last quantized layer).
    pub fn output_qp(&self) -> Result<&QuantParams> {
        self.layers
            .iter()
            .rev()
            .find_map(|l| l.out_qp.as_ref())
            .ok_or_else(|| Error::invalid_state("graph has no quantized output"))
    }

    /// Quantizes a `[0, 1]` float image with the input parameters.
    pub fn quantize_input(&self, x: &Tensor) -> QTensor {
        let data = x
            .data()
            .iter()
            .map(|&v| {
                let (q, _) = quantize_value(v, self.input_scale, self.input_zp, ACT_QMIN, ACT_QMAX);
                q as u8
            })
            .collect();
        QTensor {
            shape: x.shape(),
            data,
        }
    }

    /// Dequantizes an output tensor back to floats.
    pub fn dequantize_output(&self, y: &QTensor) -> Result<Tensor> {
        let qp = self.output_qp()?;
        let (s, zp) = (qp.scale(), qp.zero_point);
        let data = y
            .data
            .iter()
            .map(|&q| super::dequantize_value(i32::from(q), s, zp))
            .collect();
        Tensor::from_vec(y.shape, data)
    }
}

fn conv_layer_int(
    layer: &GraphLayer,
    x: &QTensor,
    in_scale: f32,
    in_zp: i32,
    relu: bool,
) -> Result<(QTensor, f32, i32)> {
    let [c_out, c_in, k, _] = layer.weight_shape;
    let [n, xc, h, w] = x.shape;
    if xc != c_in {
        return Err(Error::invalid_argument(format!(
            "integer conv: input has {xc} channels, weights expect {c_in}"
        )));
    }
    let qp = layer
        .out_qp
        .as_ref()
        .ok_or_else(|| Error::invalid_state("conv layer missing quantization parameters"))?;
    if layer.weight_scales.len() != c_out || layer.bias.len() != c_out {
        return Err(Error::invalid_state(
            "conv layer missing weight scales or bias",
        ));
    }
    let pad = (k - 1) / 2;
    let (s_out, zp_out) = (qp.scale(), qp.zero_point);
    let plane = h * w;
    let row = c_in * k * k;
    let mut out = vec![0u8; n * c_out * plane];

    let compute_plane = |idx: usize, out_plane: &mut [u8]| {
        let (ni, oc) = (idx / c_out, idx % c_out);
        let weights = &layer.weight[oc * row..(oc + 1) * row];
        let multiplier = f64::from(in_scale) * f64::from(layer.weight_scales[oc]) / f64::from(s_out);
        let bias = layer.bias[oc];
        for oh in 0..h {
            for ow in 0..w {
                let mut acc = 0i32;
                for ic in 0..c_in {
                    let xplane = &x.data[(ni * c_in + ic) * plane..][..plane];
                    for kh in 0..k {
                        let ih = oh as isize + kh as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let iw = ow as isize + kw as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let xv = i32::from(xplane[ih as usize * w + iw as usize]) - in_zp;
                            let wv = i32::from(weights[(ic * k + kh) * k + kw]);
                            acc += wv * xv;
                        }
                    }
                }
                let v = acc + bias;
                let mut q = (f64::from(v) * multiplier).round_ties_even() as i64 + i64::from(zp_out);
                if relu {
                    q = q.max(i64::from(zp_out));
                }
                out_plane[oh * w + ow] = q.clamp(i64::from(ACT_QMIN), i64::from(ACT_QMAX)) as u8;
            }
        }
    };

    #[cfg(feature = "parallel")]
    out.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, p)| compute_plane(idx, p));
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, p)| compute_plane(idx, p));

    Ok((
        QTensor {
            shape: [n, c_out, h, w],
            data: out,
        },
        s_out,
        zp_out,
    ))
}

/// Runs the graph on a pre-quantized input. Output stays in the graph's
/// output quantization domain; use [`DeployGraph::dequantize_output`] to
/// get floats.
/// Parses a serialized deploy graph; the byte-level inverse of
/// [`DeployGraph::to_bytes`].
pub fn import_graph(bytes: &[u8]) -> Result<DeployGraph> {
    DeployGraph::from_bytes(bytes)
}

pub fn integer_infer(graph: &DeployGraph, x: &QTensor) -> Result<QTensor> {
    let mut outputs: Vec<(QTensor, f32, i32)> = Vec::with_capacity(graph.layers.len());
    let mut cur = (x.clone(), graph.input_scale, graph.input_zp);
    for (li, layer) in graph.layers.iter().enumerate() {
        let next = match &layer.op {
            GraphOp::Conv { relu } => conv_layer_int(layer, &cur.0, cur.1, cur.2, *relu)?,
            GraphOp::SkipAdd { tap } => {
                let (a, s_a, zp_a) = &cur;
                let (b, s_b, zp_b) = outputs.get(*tap).ok_or_else(|| {
                    Error::invalid_state(format!("skip-add layer {li} taps missing layer {tap}"))
                })?;
                if a.shape != b.shape {
                    return Err(Error::invalid_argument(format!(
                        "skip-add shape mismatch {:?} vs {:?}",
                        a.shape, b.shape
                    )));
                }
                let qp = layer.out_qp.as_ref().ok_or_else(|| {
                    Error::invalid_state("skip-add layer missing quantization parameters")
                })?;
                let (s_c, zp_c) = (qp.scale(), qp.zero_point);
                let ra = f64::from(*s_a) / f64::from(s_c);
                let rb = f64::from(*s_b) / f64::from(s_c);
                let data = a
                    .data
                    .iter()
                    .zip(&b.data)
                    .map(|(&av, &bv)| {
                        let aq = (f64::from(i32::from(av) - zp_a) * ra).round_ties_even() as i64
                            + i64::from(zp_c);
                        let bq = (f64::from(i32::from(bv) - zp_b) * rb).round_ties_even() as i64
                            + i64::from(zp_c);
                        (aq + bq - i64::from(zp_c)).clamp(i64::from(ACT_QMIN), i64::from(ACT_QMAX))
                            as u8
                    })
                    .collect();
                (
                    QTensor {
                        shape: a.shape,
                        data,
                    },
                    s_c,
                    zp_c,
                )
            }
            GraphOp::PixelShuffle { r } => {
                let (a, s, zp) = &cur;
                let [n, c, h, w] = a.shape;
                if *r == 0 || c % (r * r) != 0 {
                    return Err(Error::invalid_argument(format!(
                        "pixel shuffle: {c} channels not divisible by r^2 = {}",
                        r * r
                    )));
                }
                let co = c / (r * r);
                let mut data = vec![0u8; a.data.len()];
                for ni in 0..n {
                    for cc in 0..co {
                        for ai in 0..*r {
                            for bi in 0..*r {
                                let cin = cc * r * r + ai * r + bi;
                                for i in 0..h {
                                    for j in 0..w {
                                        let src = ((ni * c + cin) * h + i) * w + j;
                                        let dst = ((ni * co + cc) * (h * r) + (r * i + ai))
                                            * (w * r)
                                            + (r * j + bi);
                                        data[dst] = a.data[src];
                                    }
                                }
                            }
                        }
                    }
                }
                (
                    QTensor {
                        shape: [n, co, h * r, w * r],
                        data,
                    },
                    *s,
                    *zp,
                )
            }
        };
        outputs.push(cur);
        cur = next;
    }
    Ok(cur.0)
}

/// Float simulation of the exported graph: convolutions run in floating
/// point on the dequantized int8 weights and biases, with activations
/// fake-quantized at every node exactly as the integer path quantizes
/// them. Used to evaluate a graph file in fake-quant mode.
pub fn simulate_fake_quant(graph: &DeployGraph, x: &Tensor) -> Result<Tensor> {
    use crate::tensor::{add, conv2d, pixel_shuffle, relu, ConvParams};
    let input_qp = act_qp(graph.input_scale, graph.input_zp);
    let mut cur = super::fake_quant(x, &input_qp)?;
    let mut outputs: Vec<Tensor> = Vec::with_capacity(graph.layers.len());
    let mut in_scale = graph.input_scale;
    for (li, layer) in graph.layers.iter().enumerate() {
        let next = match &layer.op {
            GraphOp::Conv { relu: has_relu } => {
                let [c_out, c_in, k, _] = layer.weight_shape;
                let row = c_in * k * k;
                let mut weight = Tensor::zeros(layer.weight_shape);
                for oc in 0..c_out {
                    let s = layer.weight_scales[oc];
                    for i in 0..row {
                        weight.data_mut()[oc * row + i] =
                            (f64::from(layer.weight[oc * row + i]) * f64::from(s)) as f32;
                    }
                }
                let mut bias = Tensor::zeros([c_out, 1, 1, 1]);
                for oc in 0..c_out {
                    bias.data_mut()[oc] = (f64::from(layer.bias[oc])
                        * f64::from(in_scale)
                        * f64::from(layer.weight_scales[oc]))
                        as f32;
                }
                let qp = layer.out_qp.as_ref().ok_or_else(|| {
                    Error::invalid_state("conv layer missing quantization parameters")
                })?;
                let y = conv2d(&cur, &ConvParams { weight, bias })?;
                let y = if *has_relu { relu(&y) } else { y };
                in_scale = qp.scale();
                super::fake_quant(&y, qp)?
            }
            GraphOp::SkipAdd { tap } => {
                let qp = layer.out_qp.as_ref().ok_or_else(|| {
                    Error::invalid_state("skip-add layer missing quantization parameters")
                })?;
                let other = outputs.get(*tap).ok_or_else(|| {
                    Error::invalid_state(format!("skip-add layer {li} taps missing layer {tap}"))
                })?;
                in_scale = qp.scale();
                super::fake_quant(&add(&cur, other)?, qp)?
            }
            GraphOp::PixelShuffle { r } => pixel_shuffle(&cur, *r)?,
        };
        outputs.push(cur);
        cur = next;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_conv_graph(w: i8, bias: i32, s_in: f32, s_w: f32, s_out: f32) -> DeployGraph {
        DeployGraph {
            input_scale: s_in,
            input_zp: 0,
            layers: vec![GraphLayer {
                op: GraphOp::Conv { relu: false },
                weight_shape: [1, 1, 1, 1],
                out_qp: Some(act_qp(s_out, 0)),
                weight_scales: vec![s_w],
                weight: vec![w],
                bias: vec![bias],
            }],
        }
    }

    #[test]
    fn unit_scale_conv_is_exact() {
        // 1x1 conv, all scales 1, zp 0, w = 2, x = 3 -> 6
        let g = one_conv_graph(2, 0, 1.0, 1.0, 1.0);
        let x = QTensor {
            shape: [1, 1, 1, 1],
            data: vec![3],
        };
        let y = integer_infer(&g, &x).unwrap();
        assert_eq!(y.data, vec![6]);
    }

    #[test]
    fn bias_and_requant() {
        // acc = 2*3 = 6, bias 4 -> 10, multiplier 0.5 -> 5
        let g = one_conv_graph(2, 4, 1.0, 0.5, 1.0);
        let x = QTensor {
            shape: [1, 1, 1, 1],
            data: vec![3],
        };
        let y = integer_infer(&g, &x).unwrap();
        assert_eq!(y.data, vec![5]);
    }

    #[test]
    fn roundtrip_bytes_identical() {
        let g = one_conv_graph(7, -3, 0.013, 0.002, 0.02);
        let bytes = g.to_bytes();
        let g2 = DeployGraph::from_bytes(&bytes).unwrap();
        assert_eq!(g, g2);
        assert_eq!(bytes, g2.to_bytes());
    }

    #[test]
    fn truncated_and_corrupt_files_fail() {
        let g = one_conv_graph(7, -3, 0.013, 0.002, 0.02);
        let bytes = g.to_bytes();
        assert!(DeployGraph::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[6] ^= 0xff;
        assert!(DeployGraph::from_bytes(&bad).is_err());
    }

    #[test]
    fn missing_qparams_is_an_invalid_graph() {
        let mut g = one_conv_graph(1, 0, 1.0, 1.0, 1.0);
        g.layers[0].out_qp = None;
        let x = QTensor {
            shape: [1, 1, 1, 1],
            data: vec![1],
        };
        let err = integer_infer(&g, &x);
        assert!(matches!(err, Err(Error::InvalidState(_))));
    }

    #[test]
    fn relu_clamps_at_zero_point() {
        let mut g = one_conv_graph(-1, 0, 1.0, 1.0, 1.0);
        g.layers[0].out_qp = Some(act_qp(1.0, 10));
        if let GraphOp::Conv { relu } = &mut g.layers[0].op {
            *relu = true;
        }
        let x = QTensor {
            shape: [1, 1, 1, 1],
            data: vec![5],
        };
        // acc = -5, requant -> -5 + 10 = 5 < zp 10 -> clamped up to 10
        let y = integer_infer(&g, &x).unwrap();
        assert_eq!(y.data, vec![10]);
    }
}
