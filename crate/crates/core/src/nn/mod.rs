//! Encoder/decoder streams and multi-branch discriminators.
//!
//! Parameters live in a flat [`ModelParams`] map keyed by canonical names
//! such as `stream1.decoder.deconv2.weight`. Forward passes bind those
//! tensors into a [`Graph`] so the trainer can differentiate them.

mod checkpoint;
mod profile;

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::graph::{Graph, Var};
use crate::kernels::ConvCfg;
use crate::seed;
use crate::tensor::{Shape, Tensor};

pub use checkpoint::{load_tensor_file, load_vgg_weights, save_tensor_file, Checkpoint};
pub use profile::{
    DecoderProfile, DiscriminatorProfile, EncoderProfile, NetworkProfile, Norm, OutputHead,
    ProfileKind, INIT_STD, LEAKY_SLOPE, NORM_EPS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    Encoder,
    Decoder,
    Discriminator,
}

impl Part {
    pub fn name(self) -> &'static str {
        match self {
            Part::Encoder => "encoder",
            Part::Decoder => "decoder",
            Part::Discriminator => "discriminator",
        }
    }

    pub fn is_generator(self) -> bool {
        self != Part::Discriminator
    }
}

pub fn prefix(stream: usize, part: Part) -> String {
    format!("stream{stream}.{}.", part.name())
}

/// Splits a canonical name into its stream index and part.
pub fn parse_name(name: &str) -> Option<(usize, Part)> {
    let mut it = name.split('.');
    let stream = it.next()?.strip_prefix("stream")?.parse().ok()?;
    let part = match it.next()? {
        "encoder" => Part::Encoder,
        "decoder" => Part::Decoder,
        "discriminator" => Part::Discriminator,
        _ => return None,
    };
    Some((stream, part))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Named parameter tensors. Storage is shared with any graph they are
/// bound into and copied on write.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

impl ModelParams {
    pub fn new() -> Self {
        ModelParams::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name).map(|t| &**t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn shared(&self, name: &str) -> Option<Arc<Tensor>> {
        self.tensors.get(name).cloned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), &**v))
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Subset of tensors whose names satisfy `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> ModelParams {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), Arc::clone(v)))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.is_finite())
    }
}

struct LayerShape {
    name: String,
    shape: Shape,
    init: Init,
}

fn conv_shapes(out: &mut Vec<LayerShape>, name: &str, cout: usize, cin: usize, k: usize) {
    out.push(LayerShape {
        name: format!("{name}.weight"),
        shape: [cout, cin, k, k],
        init: Init::Normal,
    });
    out.push(LayerShape {
        name: format!("{name}.bias"),
        shape: [1, cout, 1, 1],
        init: Init::Zeros,
    });
}

fn norm_shapes(out: &mut Vec<LayerShape>, name: &str, c: usize, norm: Norm) {
    if norm == Norm::Batch {
        out.push(LayerShape {
            name: format!("{name}.gamma"),
            shape: [1, c, 1, 1],
            init: Init::Ones,
        });
        out.push(LayerShape {
            name: format!("{name}.beta"),
            shape: [1, c, 1, 1],
            init: Init::Zeros,
        });
    }
}

fn encoder_tap_widths(profile: &NetworkProfile) -> (usize, Vec<usize>) {
    match &profile.encoder {
        EncoderProfile::Strided { widths, .. } => {
            (*widths.last().unwrap(), widths[..widths.len() - 1].to_vec())
        }
        EncoderProfile::Vgg { stages, taps } => (
            stages.last().unwrap().1,
            taps.iter().map(|&(s, _)| stages[s - 1].1).collect(),
        ),
    }
}

fn stream_shapes(profile: &NetworkProfile, stream: usize) -> Vec<LayerShape> {
    let mut out = Vec::new();
    let c = profile.channels;
    let enc = prefix(stream, Part::Encoder);
    match &profile.encoder {
        EncoderProfile::Strided { widths, kernel, norm } => {
            let mut cin = c;
            for (i, &w) in widths.iter().enumerate() {
                conv_shapes(&mut out, &format!("{enc}conv{}", i + 1), w, cin, *kernel);
                norm_shapes(&mut out, &format!("{enc}norm{}", i + 1), w, *norm);
                cin = w;
            }
        }
        EncoderProfile::Vgg { stages, .. } => {
            let mut cin = c;
            for (s, &(n, w)) in stages.iter().enumerate() {
                for i in 0..n {
                    conv_shapes(&mut out, &format!("{enc}conv{}_{}", s + 1, i + 1), w, cin, 3);
                    cin = w;
                }
            }
        }
    }
    let (latent, taps) = encoder_tap_widths(profile);
    let dec = prefix(stream, Part::Decoder);
    match &profile.decoder {
        DecoderProfile::Mirror { widths, kernel, norm } => {
            let mut cin = latent;
            for (i, &w) in widths.iter().enumerate() {
                // transposed conv weights are [in, out, k, k]
                out.push(LayerShape {
                    name: format!("{dec}deconv{}.weight", i + 1),
                    shape: [cin, w, *kernel, *kernel],
                    init: Init::Normal,
                });
                out.push(LayerShape {
                    name: format!("{dec}deconv{}.bias", i + 1),
                    shape: [1, w, 1, 1],
                    init: Init::Zeros,
                });
                norm_shapes(&mut out, &format!("{dec}norm{}", i + 1), w, *norm);
                cin = w + if i + 1 < widths.len() { taps[taps.len() - 1 - i] } else { 0 };
            }
            conv_shapes(&mut out, &format!("{dec}out"), c, cin, 3);
        }
        DecoderProfile::Dilated {
            block_widths,
            tail_width,
            dilations,
        } => {
            let mut cin = latent + taps.iter().sum::<usize>();
            for (i, &w) in block_widths.iter().enumerate() {
                conv_shapes(&mut out, &format!("{dec}block{}", i + 1), w, cin, 3);
                cin = w;
            }
            for i in 0..dilations.len() {
                conv_shapes(&mut out, &format!("{dec}tail{}", i + 1), *tail_width, cin, 3);
                cin = *tail_width;
            }
            conv_shapes(&mut out, &format!("{dec}out"), c, cin, 1);
        }
    }
    let dis = prefix(stream, Part::Discriminator);
    let d = &profile.discriminator;
    for b in 0..d.n_branches {
        let mut cin = c;
        for (i, &w) in d.widths.iter().enumerate() {
            conv_shapes(&mut out, &format!("{dis}branch{b}.conv{}", i + 1), w, cin, d.kernel);
            cin = w;
        }
        conv_shapes(&mut out, &format!("{dis}branch{b}.logit"), 1, cin, 1);
    }
    out
}

/// Independently initialized parameters for `n_layers` streams, each with
/// an encoder, a decoder and a discriminator.
pub fn build_streams(profile: &NetworkProfile, n_layers: usize, init_seed: u64) -> Result<ModelParams> {
    profile.validate()?;
    if n_layers < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least two layers, got {n_layers}"
        )));
    }
    let mut params = ModelParams::new();
    for stream in 0..n_layers {
        for l in stream_shapes(profile, stream) {
            let t = match l.init {
                Init::Zeros => Tensor::zeros(l.shape),
                Init::Ones => Tensor::full(l.shape, 1.0),
                Init::Normal => {
                    let mut rng = seed::rng(init_seed, &l.name, 0);
                    Tensor::randn(l.shape, INIT_STD, &mut rng)
                }
            };
            params.insert(l.name, t);
        }
    }
    Ok(params)
}

/// Expected names and shapes, for validating loaded parameters.
pub fn expected_shapes(profile: &NetworkProfile, n_layers: usize) -> BTreeMap<String, Shape> {
    (0..n_layers)
        .flat_map(|s| stream_shapes(profile, s))
        .map(|l| (l.name, l.shape))
        .collect()
}

pub fn check_params(params: &ModelParams, profile: &NetworkProfile, n_layers: usize) -> Result<()> {
    let expected = expected_shapes(profile, n_layers);
    for (name, shape) in &expected {
        match params.get(name) {
            None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            Some(t) if t.shape() != *shape => {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, profile expects {shape:?}",
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = params.names().find(|n| !expected.contains_key(*n)) {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(())
}

/// Parameters bound into a graph.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds every tensor selected by `keep`; `trainable` ones become
    /// differentiable leaves, the rest constants.
    pub fn bind(
        g: &mut Graph,
        params: &ModelParams,
        keep: impl Fn(&str) -> bool,
        trainable: impl Fn(&str) -> bool,
    ) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, t) in &params.tensors {
            if !keep(name) {
                continue;
            }
            let v = if trainable(name) {
                g.param_shared(Arc::clone(t))
            } else {
                g.constant_shared(Arc::clone(t))
            };
            vars.insert(name.clone(), v);
        }
        Bound { vars }
    }

    /// Binds already-created graph variables under canonical names.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Bound {
        Bound {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Encoder output: the latent code and the skip features at tap layers.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub latent: Var,
    pub skips: Vec<Var>,
}

fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var, cfg: ConvCfg) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = g.conv2d(x, w, cfg)?;
    g.add_bias(y, b)
}

fn deconv(g: &mut Graph, p: &Bound, name: &str, x: Var, cfg: ConvCfg) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = g.conv_transpose2d(x, w, cfg)?;
    g.add_bias(y, b)
}

/// Normalizes over `to`'s broadcast axes. Returns the input untouched when
/// each statistic would cover a single element.
fn normalize(g: &mut Graph, x: Var, to: Shape) -> Result<Var> {
    let shape = g.shape(x);
    if shape.iter().product::<usize>() == to.iter().product::<usize>() {
        return Ok(x);
    }
    let m = g.mean_to(x, to)?;
    let m = g.broadcast(m, shape)?;
    let d = g.sub(x, m)?;
    let sq = g.pow(d, 2.0);
    let var = g.mean_to(sq, to)?;
    let var = g.add_scalar(var, NORM_EPS);
    let inv = g.pow(var, -0.5);
    let inv = g.broadcast(inv, shape)?;
    g.mul(d, inv)
}

fn norm(g: &mut Graph, p: &Bound, name: &str, x: Var, kind: Norm) -> Result<Var> {
    let [n, c, _, _] = g.shape(x);
    match kind {
        Norm::None => Ok(x),
        Norm::Instance => normalize(g, x, [n, c, 1, 1]),
        Norm::Batch => {
            let xh = normalize(g, x, [1, c, 1, 1])?;
            let gamma = p.get(&format!("{name}.gamma"))?;
            let beta = p.get(&format!("{name}.beta"))?;
            let shape = g.shape(xh);
            let gamma = g.broadcast(gamma, shape)?;
            let y = g.mul(xh, gamma)?;
            g.add_bias(y, beta)
        }
    }
}

fn halvable(g: &Graph, x: Var, layer: &str) -> Result<()> {
    let [_, _, h, w] = g.shape(x);
    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "{layer}: input {h}x{w} cannot be halved"
        )));
    }
    Ok(())
}

fn head(g: &mut Graph, x: Var, head: OutputHead) -> Var {
    match head {
        OutputHead::Sigmoid => g.sigmoid(x),
        OutputHead::Identity => x,
    }
}

pub fn encode(g: &mut Graph, p: &Bound, profile: &NetworkProfile, stream: usize, x: Var) -> Result<Encoded> {
    let pre = prefix(stream, Part::Encoder);
    let mut h = x;
    let mut skips = Vec::new();
    match &profile.encoder {
        EncoderProfile::Strided { widths, norm: kind, .. } => {
            let cfg = ConvCfg::new(2, 1, 1);
            for i in 0..widths.len() {
                let name = format!("{pre}conv{}", i + 1);
                halvable(g, h, &name)?;
                h = conv(g, p, &name, h, cfg)?;
                h = norm(g, p, &format!("{pre}norm{}", i + 1), h, *kind)?;
                h = g.leaky_relu(h, LEAKY_SLOPE);
                if i + 1 < widths.len() {
                    skips.push(h);
                }
            }
        }
        EncoderProfile::Vgg { stages, taps } => {
            let cfg = ConvCfg::new(1, 1, 1);
            let mut tapped = BTreeMap::new();
            for (s, &(n, _)) in stages.iter().enumerate() {
                if s > 0 {
                    halvable(g, h, &format!("{pre}pool{s}"))?;
                    h = g.max_pool2(h)?;
                }
                for i in 0..n {
                    h = conv(g, p, &format!("{pre}conv{}_{}", s + 1, i + 1), h, cfg)?;
                    h = g.relu(h);
                    tapped.insert((s + 1, i + 1), h);
                }
            }
            skips = taps.iter().map(|t| tapped[t]).collect();
        }
    }
    Ok(Encoded { latent: h, skips })
}

pub fn decode(g: &mut Graph, p: &Bound, profile: &NetworkProfile, stream: usize, enc: &Encoded) -> Result<Var> {
    let pre = prefix(stream, Part::Decoder);
    let (_, tap_widths) = encoder_tap_widths(profile);
    if enc.skips.len() != tap_widths.len() {
        return Err(Error::Shape(format!(
            "decoder expects {} skip features, got {}",
            tap_widths.len(),
            enc.skips.len()
        )));
    }
    let mut h = enc.latent;
    match &profile.decoder {
        DecoderProfile::Mirror { widths, norm: kind, .. } => {
            let cfg = ConvCfg::new(2, 1, 1);
            for i in 0..widths.len() {
                h = deconv(g, p, &format!("{pre}deconv{}", i + 1), h, cfg)?;
                h = norm(g, p, &format!("{pre}norm{}", i + 1), h, *kind)?;
                h = g.leaky_relu(h, LEAKY_SLOPE);
                if i + 1 < widths.len() {
                    let skip = enc.skips[enc.skips.len() - 1 - i];
                    let (hs, ss) = (g.shape(h), g.shape(skip));
                    if hs[0] != ss[0] || hs[2..] != ss[2..] {
                        return Err(Error::Shape(format!(
                            "{pre}deconv{}: output {hs:?} does not match skip {ss:?}",
                            i + 1
                        )));
                    }
                    h = g.concat_channels(&[h, skip])?;
                }
            }
            h = conv(g, p, &format!("{pre}out"), h, ConvCfg::new(1, 1, 1))?;
        }
        DecoderProfile::Dilated { block_widths, dilations, .. } => {
            let [n, _, lh, lw] = g.shape(h);
            let mut parts = vec![h];
            for &skip in &enc.skips {
                let mut s = skip;
                while g.shape(s)[2] > lh {
                    halvable(g, s, &format!("{pre}skip-pool"))?;
                    s = g.avg_pool2(s)?;
                }
                let ss = g.shape(s);
                if ss[0] != n || ss[2] != lh || ss[3] != lw {
                    return Err(Error::Shape(format!(
                        "{pre}skip {ss:?} does not reduce to the latent size {lh}x{lw}"
                    )));
                }
                parts.push(s);
            }
            h = g.concat_channels(&parts)?;
            for i in 0..block_widths.len() {
                h = conv(g, p, &format!("{pre}block{}", i + 1), h, ConvCfg::new(1, 1, 1))?;
                h = g.leaky_relu(h, LEAKY_SLOPE);
                h = g.upsample2(h);
            }
            for (i, &d) in dilations.iter().enumerate() {
                h = conv(g, p, &format!("{pre}tail{}", i + 1), h, ConvCfg::new(1, d, d))?;
                h = norm(g, p, "", h, Norm::Instance)?;
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
            h = conv(g, p, &format!("{pre}out"), h, ConvCfg::new(1, 0, 1))?;
        }
    }
    Ok(head(g, h, profile.head))
}

/// Fused discriminator logit per sample, shape `[n, 1, 1, 1]`; the score
/// is its sigmoid.
pub fn discriminate_logit(
    g: &mut Graph,
    p: &Bound,
    profile: &NetworkProfile,
    stream: usize,
    x: Var,
) -> Result<Var> {
    let pre = prefix(stream, Part::Discriminator);
    let d = &profile.discriminator;
    let n = g.shape(x)[0];
    let cfg = ConvCfg::new(2, 1, 1);
    let mut input = x;
    let mut fused: Option<Var> = None;
    for b in 0..d.n_branches {
        if b > 0 {
            halvable(g, input, &format!("{pre}branch{b}.pool"))?;
            input = g.avg_pool2(input)?;
        }
        let mut h = input;
        for i in 0..d.widths.len() {
            let name = format!("{pre}branch{b}.conv{}", i + 1);
            halvable(g, h, &name)?;
            h = conv(g, p, &name, h, cfg)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        h = conv(g, p, &format!("{pre}branch{b}.logit"), h, ConvCfg::new(1, 0, 1))?;
        let l = g.mean_to(h, [n, 1, 1, 1])?;
        fused = Some(match fused {
            None => l,
            Some(f) => g.add(f, l)?,
        });
    }
    let fused = fused.ok_or_else(|| Error::InvalidConfig("discriminator has no branches".into()))?;
    Ok(g.scale(fused, 1.0 / d.n_branches as f64))
}

/// A latent code detached from any graph, tagged with its encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub stream: usize,
    pub code: Tensor,
}

/// Parameters together with the profile they were built for.
#[derive(Clone, Debug)]
pub struct Model {
    pub profile: NetworkProfile,
    pub n_layers: usize,
    pub params: ModelParams,
}

impl Model {
    pub fn build(profile: NetworkProfile, n_layers: usize, init_seed: u64) -> Result<Model> {
        let params = build_streams(&profile, n_layers, init_seed)?;
        Ok(Model {
            profile,
            n_layers,
            params,
        })
    }

    pub fn from_params(profile: NetworkProfile, n_layers: usize, params: ModelParams) -> Result<Model> {
        profile.validate()?;
        check_params(&params, &profile, n_layers)?;
        Ok(Model {
            profile,
            n_layers,
            params,
        })
    }

    fn check_stream(&self, stream: usize) -> Result<()> {
        if stream >= self.n_layers {
            return Err(Error::InvalidInput(format!(
                "stream {stream} out of range for {} layers",
                self.n_layers
            )));
        }
        Ok(())
    }

    fn bind_part(&self, g: &mut Graph, stream: usize, parts: &[Part]) -> Bound {
        Bound::bind(
            g,
            &self.params,
            |n| matches!(parse_name(n), Some((s, p)) if s == stream && parts.contains(&p)),
            |_| false,
        )
    }

    /// Latent code and skip features for a `[n, c, h, w]` batch.
    pub fn encode(&self, exec: Exec, stream: usize, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_stream(stream)?;
        let mut g = Graph::new(exec);
        let p = self.bind_part(&mut g, stream, &[Part::Encoder]);
        let xv = g.constant(x.clone());
        let e = encode(&mut g, &p, &self.profile, stream, xv)?;
        Ok((
            g.value(e.latent).clone(),
            e.skips.iter().map(|&s| g.value(s).clone()).collect(),
        ))
    }

    pub fn decode(&self, exec: Exec, stream: usize, latent: &Tensor, skips: &[Tensor]) -> Result<Tensor> {
        self.check_stream(stream)?;
        let mut g = Graph::new(exec);
        let p = self.bind_part(&mut g, stream, &[Part::Decoder]);
        let enc = Encoded {
            latent: g.constant(latent.clone()),
            skips: skips.iter().map(|s| g.constant(s.clone())).collect(),
        };
        let y = decode(&mut g, &p, &self.profile, stream, &enc)?;
        Ok(g.value(y).clone())
    }

    /// Discriminator scores in `(0, 1)`, one per sample.
    pub fn discriminate(&self, exec: Exec, stream: usize, x: &Tensor) -> Result<Vec<f64>> {
        self.check_stream(stream)?;
        let mut g = Graph::new(exec);
        let p = self.bind_part(&mut g, stream, &[Part::Discriminator]);
        let xv = g.constant(x.clone());
        let l = discriminate_logit(&mut g, &p, &self.profile, stream, xv)?;
        Ok(g.value(l).data().iter().map(|&v| crate::graph::sigmoid(v)).collect())
    }

    /// One predicted layer per stream.
    pub fn separate(&self, exec: Exec, x: &Tensor) -> Result<Vec<Tensor>> {
        let [_, _, h, w] = x.shape();
        self.profile.check_input(h, w)?;
        let mut g = Graph::new(exec);
        let p = Bound::bind(
            &mut g,
            &self.params,
            |n| matches!(parse_name(n), Some((_, part)) if part.is_generator()),
            |_| false,
        );
        let xv = g.constant(x.clone());
        let mut out = Vec::with_capacity(self.n_layers);
        for k in 0..self.n_layers {
            let e = encode(&mut g, &p, &self.profile, k, xv)?;
            let y = decode(&mut g, &p, &self.profile, k, &e)?;
            out.push(g.value(y).clone());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(shape: Shape, seed: u64) -> Tensor {
        Tensor::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn synthetic_encoder_param_count_matches_closed_form() {
        // conv: c_in * c_out * 16 + c_out (bias), batch norm: 2 * c_out
        let widths = [16usize, 32, 64, 128, 256];
        let mut expected = 0;
        let mut cin = 3;
        for w in widths {
            expected += cin * w * 16 + w + 2 * w;
            cin = w;
        }
        assert_eq!(expected, 698_576);
        let params = build_streams(&NetworkProfile::synthetic(), 2, 0).unwrap();
        let enc = params.filter(|n| n.starts_with("stream0.encoder."));
        assert_eq!(enc.numel(), expected);
    }

    #[test]
    fn builds_are_deterministic_and_streams_disjoint() {
        let profile = NetworkProfile::synthetic_mini();
        let a = build_streams(&profile, 3, 7).unwrap();
        let b = build_streams(&profile, 3, 7).unwrap();
        let c = build_streams(&profile, 3, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for s in 0..3 {
            let names: Vec<_> = a.names().filter(|n| parse_name(n).unwrap().0 == s).collect();
            assert!(!names.is_empty());
            for t in 0..3 {
                if s != t {
                    assert!(names.iter().all(|n| parse_name(n).unwrap().0 != t));
                }
            }
        }
        // equal shapes but independent draws
        let w0 = a.get("stream0.encoder.conv1.weight").unwrap();
        let w1 = a.get("stream1.encoder.conv1.weight").unwrap();
        assert_eq!(w0.shape(), w1.shape());
        assert_ne!(w0, w1);
        assert!(build_streams(&profile, 1, 0).is_err());
    }

    #[test]
    fn synthetic_latent_and_output_shapes() {
        let model = Model::build(NetworkProfile::synthetic(), 2, 0).unwrap();
        let x = input([1, 3, 128, 128], 1);
        let (latent, skips) = model.encode(Exec::default(), 0, &x).unwrap();
        assert_eq!(latent.shape(), [1, 256, 4, 4]);
        assert_eq!(skips.len(), 4);
        assert!(latent.is_finite());
        let y = model.decode(Exec::default(), 0, &latent, &skips).unwrap();
        assert_eq!(y.shape(), [1, 3, 128, 128]);
        assert!(y.is_finite());
    }

    #[test]
    fn encode_is_deterministic() {
        let model = Model::build(NetworkProfile::synthetic_mini(), 2, 3).unwrap();
        let x = input([1, 3, 16, 16], 2);
        assert_eq!(
            model.encode(Exec::default(), 1, &x).unwrap(),
            model.encode(Exec::default(), 1, &x).unwrap()
        );
    }

    #[test]
    fn round_trip_shapes_for_both_profiles() {
        for (profile, sizes) in [
            (NetworkProfile::synthetic_mini(), vec![16, 32, 48]),
            (NetworkProfile::real_mini(), vec![16, 32]),
        ] {
            let model = Model::build(profile, 2, 0).unwrap();
            for s in sizes {
                let x = input([1, 3, s, s], s as u64);
                let out = model.separate(Exec::default(), &x).unwrap();
                assert_eq!(out.len(), 2);
                for y in out {
                    assert_eq!(y.shape(), [1, 3, s, s]);
                    assert!(y.is_finite());
                }
            }
        }
    }

    #[test]
    fn indivisible_input_names_the_layer() {
        let model = Model::build(NetworkProfile::synthetic_mini(), 2, 0).unwrap();
        let err = model.encode(Exec::default(), 0, &input([1, 3, 12, 12], 0)).unwrap_err();
        assert!(err.to_string().contains("conv3"), "{err}");
    }

    #[test]
    fn mismatched_skips_are_rejected() {
        let model = Model::build(NetworkProfile::synthetic_mini(), 2, 0).unwrap();
        let (latent, mut skips) = model.encode(Exec::default(), 0, &input([1, 3, 16, 16], 0)).unwrap();
        skips.pop();
        assert!(matches!(
            model.decode(Exec::default(), 0, &latent, &skips),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn decoder_ignores_other_streams() {
        let mut model = Model::build(NetworkProfile::synthetic_mini(), 2, 0).unwrap();
        let x = input([1, 3, 16, 16], 4);
        let before = model.separate(Exec::default(), &x).unwrap();
        let w = model.params.get_mut("stream1.decoder.out.weight").unwrap();
        w.data_mut()[0] += 1.0;
        let after = model.separate(Exec::default(), &x).unwrap();
        assert_eq!(before[0], after[0]);
        assert_ne!(before[1], after[1]);
    }

    #[test]
    fn discriminator_scores_in_unit_interval() {
        for profile in [NetworkProfile::synthetic_mini(), NetworkProfile::real_mini()] {
            let model = Model::build(profile, 2, 5).unwrap();
            let x = input([3, 3, 16, 16], 9);
            let s = model.discriminate(Exec::default(), 0, &x).unwrap();
            assert_eq!(s.len(), 3);
            assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
            assert_eq!(s, model.discriminate(Exec::default(), 0, &x).unwrap());
        }
        let model = Model::build(NetworkProfile::real_mini(), 2, 5).unwrap();
        assert!(matches!(
            model.discriminate(Exec::default(), 0, &input([1, 3, 8, 8], 0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn one_branch_equals_branch_zero() {
        let mut profile = NetworkProfile::real_mini();
        let three = Model::build(profile.clone(), 2, 1).unwrap();
        profile.discriminator.n_branches = 1;
        let params = three.params.filter(|n| !n.contains(".branch1.") && !n.contains(".branch2."));
        let one = Model::from_params(profile.clone(), 2, params).unwrap();
        let x = input([1, 3, 16, 16], 3);

        let mut g = Graph::default();
        let p = Bound::bind(&mut g, &three.params, |_| true, |_| false);
        let xv = g.constant(x.clone());
        let mut h = xv;
        for i in 0..2 {
            h = conv(&mut g, &p, &format!("stream0.discriminator.branch0.conv{}", i + 1), h, ConvCfg::new(2, 1, 1)).unwrap();
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        h = conv(&mut g, &p, "stream0.discriminator.branch0.logit", h, ConvCfg::new(1, 0, 1)).unwrap();
        let branch0 = crate::graph::sigmoid(g.value(h).mean());
        let fused = one.discriminate(Exec::default(), 0, &x).unwrap()[0];
        assert!((branch0 - fused).abs() < 1e-15);
    }

    #[test]
    fn single_pixel_batch_norm_is_skipped() {
        // 32x32 input to the full synthetic encoder gives a 1x1 latent
        let model = Model::build(NetworkProfile::synthetic(), 2, 0).unwrap();
        let (latent, _) = model.encode(Exec::default(), 0, &input([1, 3, 32, 32], 0)).unwrap();
        assert_eq!(latent.shape(), [1, 256, 1, 1]);
        assert!(latent.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn param_check_rejects_foreign_profiles() {
        let params = build_streams(&NetworkProfile::synthetic_mini(), 2, 0).unwrap();
        assert!(check_params(&params, &NetworkProfile::synthetic_mini(), 2).is_ok());
        assert!(check_params(&params, &NetworkProfile::real_mini(), 2).is_err());
        assert!(check_params(&params, &NetworkProfile::synthetic_mini(), 3).is_err());
    }
}
