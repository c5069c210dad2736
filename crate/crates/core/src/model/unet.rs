use crate::error::Result;
use crate::tensor::{FeatureMap, Scalar, Tensor};

use super::attention::{
    cse_hidden, scse_backward, scse_forward_cached, CseParams, ScseCache, ScseGrads, SseParams,
};
use super::layers::{
    concat, conv_backward, conv_forward, maxpool2_backward, maxpool2_forward,
    relu_backward_inplace, relu_inplace, split, upsample2_backward, upsample2_forward, ConvCache,
};
use super::{ModelConfig, ParamSet};

#[derive(Clone, Debug)]
struct ConvNames {
    weight: String,
    bias: String,
    cin: usize,
    cout: usize,
    kernel: usize,
}

impl ConvNames {
    fn new(prefix: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        ConvNames {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            cin,
            cout,
            kernel,
        }
    }
}

#[derive(Clone, Debug)]
struct AttentionNames {
    fc1_weight: String,
    fc1_bias: String,
    fc2_weight: String,
    fc2_bias: String,
    sse_weight: String,
    sse_bias: String,
    channels: usize,
    hidden: usize,
}

impl AttentionNames {
    fn new(prefix: &str, channels: usize, reduction: usize) -> Self {
        AttentionNames {
            fc1_weight: format!("{prefix}.cse_fc1.weight"),
            fc1_bias: format!("{prefix}.cse_fc1.bias"),
            fc2_weight: format!("{prefix}.cse_fc2.weight"),
            fc2_bias: format!("{prefix}.cse_fc2.bias"),
            sse_weight: format!("{prefix}.sse.weight"),
            sse_bias: format!("{prefix}.sse.bias"),
            channels,
            hidden: cse_hidden(channels, reduction),
        }
    }

    fn params<'a, T: Scalar>(
        &self,
        p: &'a ParamSet<T>,
    ) -> Result<(CseParams<'a, T>, SseParams<'a, T>)> {
        Ok((
            CseParams {
                fc1_weight: p.get(&self.fc1_weight)?,
                fc1_bias: p.get(&self.fc1_bias)?,
                fc2_weight: p.get(&self.fc2_weight)?,
                fc2_bias: p.get(&self.fc2_bias)?,
            },
            SseParams {
                weight: p.get(&self.sse_weight)?,
                bias: p.get(&self.sse_bias)?,
            },
        ))
    }
}

/// Two 3x3 conv + ReLU layers, optionally followed by scSE.
#[derive(Clone, Debug)]
struct Block {
    conv1: ConvNames,
    conv2: ConvNames,
    attention: Option<AttentionNames>,
}

impl Block {
    fn new(prefix: &str, cin: usize, cout: usize, config: &ModelConfig) -> Self {
        Block {
            conv1: ConvNames::new(&format!("{prefix}.conv1"), cin, cout, 3),
            conv2: ConvNames::new(&format!("{prefix}.conv2"), cout, cout, 3),
            attention: config
                .attention_enabled
                .then(|| AttentionNames::new(&format!("{prefix}.att"), cout, config.cse_reduction)),
        }
    }
}

#[derive(Clone, Debug)]
struct UpStage {
    up: ConvNames,
    block: Block,
}

/// Layout and evaluation of the U-Net for one [`ModelConfig`].
///
/// Encoder stage `i` has `base << i` channels; stage `depth` is the
/// bottleneck. Each decoder stage up-samples 2x (nearest), applies a 3x3
/// conv + ReLU, concatenates the encoder skip, then runs a [`Block`]. A final
/// 1x1 conv produces the class logits.
#[derive(Clone, Debug)]
pub struct UNet {
    config: ModelConfig,
    encoder: Vec<Block>,
    decoder: Vec<UpStage>,
    head: ConvNames,
}

struct ConvReluCache<T> {
    conv: ConvCache<T>,
    out: FeatureMap<T>,
}

struct BlockCache<T> {
    c1: ConvReluCache<T>,
    c2: ConvReluCache<T>,
    attention: Option<ScseCache<T>>,
}

struct UpCache<T> {
    up: ConvReluCache<T>,
    block: BlockCache<T>,
}

/// Everything the backward pass needs from one forward evaluation.
pub(crate) struct ForwardCache<T> {
    encoder: Vec<BlockCache<T>>,
    pools: Vec<(Vec<u32>, (usize, usize, usize))>,
    decoder: Vec<UpCache<T>>,
    head: ConvCache<T>,
}

fn conv_relu<T: Scalar>(
    names: &ConvNames,
    p: &ParamSet<T>,
    x: &FeatureMap<T>,
) -> Result<ConvReluCache<T>> {
    let (mut out, conv) = conv_forward(x, p.get(&names.weight)?, p.get(&names.bias)?);
    relu_inplace(&mut out);
    Ok(ConvReluCache { conv, out })
}

fn conv_relu_backward<T: Scalar>(
    names: &ConvNames,
    p: &ParamSet<T>,
    grads: &mut ParamSet<T>,
    cache: &ConvReluCache<T>,
    mut dout: FeatureMap<T>,
    need_input_grad: bool,
) -> Result<Option<FeatureMap<T>>> {
    relu_backward_inplace(&mut dout, &cache.out);
    let weight = p.get(&names.weight)?;
    let mut dw = std::mem::replace(grads.get_mut(&names.weight)?, Tensor::zeros(&[0]));
    let dx = conv_backward(
        &dout,
        &cache.conv,
        weight,
        &mut dw,
        grads.get_mut(&names.bias)?,
        need_input_grad,
    );
    *grads.get_mut(&names.weight)? = dw;
    Ok(dx)
}

impl Block {
    fn forward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        x: &FeatureMap<T>,
    ) -> Result<(FeatureMap<T>, BlockCache<T>)> {
        let c1 = conv_relu(&self.conv1, p, x)?;
        let c2 = conv_relu(&self.conv2, p, &c1.out)?;
        match &self.attention {
            Some(att) => {
                let (cse, sse) = att.params(p)?;
                let (y, cache) = scse_forward_cached(&c2.out, &cse, &sse)?;
                Ok((
                    y,
                    BlockCache {
                        c1,
                        c2,
                        attention: Some(cache),
                    },
                ))
            }
            None => {
                let y = c2.out.clone();
                Ok((
                    y,
                    BlockCache {
                        c1,
                        c2,
                        attention: None,
                    },
                ))
            }
        }
    }

    fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        grads: &mut ParamSet<T>,
        cache: &BlockCache<T>,
        dout: FeatureMap<T>,
        need_input_grad: bool,
    ) -> Result<Option<FeatureMap<T>>> {
        let d2 = match (&self.attention, &cache.attention) {
            (Some(att), Some(att_cache)) => {
                let (cse, sse) = att.params(p)?;
                let mut fc1w = take(grads, &att.fc1_weight)?;
                let mut fc1b = take(grads, &att.fc1_bias)?;
                let mut fc2w = take(grads, &att.fc2_weight)?;
                let mut fc2b = take(grads, &att.fc2_bias)?;
                let mut sw = take(grads, &att.sse_weight)?;
                let mut sb = take(grads, &att.sse_bias)?;
                let dx = scse_backward(
                    &dout,
                    &cache.c2.out,
                    att_cache,
                    &cse,
                    &sse,
                    ScseGrads {
                        fc1_weight: &mut fc1w.data,
                        fc1_bias: &mut fc1b.data,
                        fc2_weight: &mut fc2w.data,
                        fc2_bias: &mut fc2b.data,
                        sse_weight: &mut sw.data,
                        sse_bias: &mut sb.data,
                    },
                );
                *grads.get_mut(&att.fc1_weight)? = fc1w;
                *grads.get_mut(&att.fc1_bias)? = fc1b;
                *grads.get_mut(&att.fc2_weight)? = fc2w;
                *grads.get_mut(&att.fc2_bias)? = fc2b;
                *grads.get_mut(&att.sse_weight)? = sw;
                *grads.get_mut(&att.sse_bias)? = sb;
                dx
            }
            _ => dout,
        };
        let d1 = conv_relu_backward(&self.conv2, p, grads, &cache.c2, d2, true)?
            .expect("input gradient requested");
        conv_relu_backward(&self.conv1, p, grads, &cache.c1, d1, need_input_grad)
    }
}

fn take<T: Scalar>(grads: &mut ParamSet<T>, name: &str) -> Result<Tensor<T>> {
    Ok(std::mem::replace(grads.get_mut(name)?, Tensor::zeros(&[0])))
}

impl UNet {
    pub fn new(config: &ModelConfig) -> Self {
        let depth = config.depth;
        let encoder = (0..=depth)
            .map(|i| {
                let cin = if i == 0 {
                    config.in_channels
                } else {
                    config.stage_channels(i - 1)
                };
                Block::new(&format!("enc{i}"), cin, config.stage_channels(i), config)
            })
            .collect();
        let decoder = (0..depth)
            .map(|i| {
                let c = config.stage_channels(i);
                UpStage {
                    up: ConvNames::new(&format!("dec{i}.up"), config.stage_channels(i + 1), c, 3),
                    block: Block::new(&format!("dec{i}"), 2 * c, c, config),
                }
            })
            .collect();
        UNet {
            config: config.clone(),
            encoder,
            decoder,
            head: ConvNames::new("head", config.base_channels, config.num_classes, 1),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter names and shapes in construction order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<(String, Vec<usize>)>, c: &ConvNames| {
            out.push((c.weight.clone(), vec![c.cout, c.cin, c.kernel, c.kernel]));
            out.push((c.bias.clone(), vec![c.cout]));
        };
        let block = |out: &mut Vec<(String, Vec<usize>)>, b: &Block| {
            conv(out, &b.conv1);
            conv(out, &b.conv2);
            if let Some(a) = &b.attention {
                out.push((a.fc1_weight.clone(), vec![a.hidden, a.channels]));
                out.push((a.fc1_bias.clone(), vec![a.hidden]));
                out.push((a.fc2_weight.clone(), vec![a.channels, a.hidden]));
                out.push((a.fc2_bias.clone(), vec![a.channels]));
                out.push((a.sse_weight.clone(), vec![1, a.channels, 1, 1]));
                out.push((a.sse_bias.clone(), vec![1]));
            }
        };
        for b in &self.encoder {
            block(&mut out, b);
        }
        for d in &self.decoder {
            conv(&mut out, &d.up);
            block(&mut out, &d.block);
        }
        conv(&mut out, &self.head);
        out
    }

    fn check_params<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        for (name, shape) in self.layout() {
            let t = params.get(&name)?;
            if t.shape != shape {
                return Err(crate::Error::shape(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
        }
        Ok(())
    }

    fn check_image<T: Scalar>(&self, image: &FeatureMap<T>) -> Result<()> {
        if image.channels != self.config.in_channels {
            return Err(crate::Error::shape(format!(
                "image has {} channels, model expects {}",
                image.channels, self.config.in_channels
            )));
        }
        self.config.check_input(image.height, image.width)
    }

    /// Pre-softmax class logits, `num_classes x H x W`.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        image: &FeatureMap<T>,
    ) -> Result<FeatureMap<T>> {
        Ok(self.forward_cached(params, image)?.0)
    }

    pub(crate) fn forward_cached<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        image: &FeatureMap<T>,
    ) -> Result<(FeatureMap<T>, ForwardCache<T>)> {
        self.check_image(image)?;
        self.check_params(params)?;
        let depth = self.config.depth;
        let mut enc_caches = Vec::with_capacity(depth + 1);
        let mut pools = Vec::with_capacity(depth);
        let mut skips: Vec<FeatureMap<T>> = Vec::with_capacity(depth);
        let mut x = image.clone();
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                let (pooled, arg) = maxpool2_forward(&x);
                pools.push((arg, x.shape()));
                skips.push(x);
                x = pooled;
            }
            let (y, cache) = block.forward(params, &x)?;
            enc_caches.push(cache);
            x = y;
        }
        let mut dec_caches: Vec<Option<UpCache<T>>> = (0..depth).map(|_| None).collect();
        for i in (0..depth).rev() {
            let stage = &self.decoder[i];
            let up = conv_relu(&stage.up, params, &upsample2_forward(&x))?;
            let cat = concat(&skips[i], &up.out);
            let (y, block) = stage.block.forward(params, &cat)?;
            dec_caches[i] = Some(UpCache { up, block });
            x = y;
        }
        let (logits, head) = conv_forward(
            &x,
            params.get(&self.head.weight)?,
            params.get(&self.head.bias)?,
        );
        Ok((
            logits,
            ForwardCache {
                encoder: enc_caches,
                pools,
                decoder: dec_caches.into_iter().map(|c| c.expect("filled")).collect(),
                head,
            },
        ))
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d logits`.
    pub(crate) fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: &ForwardCache<T>,
        dlogits: FeatureMap<T>,
        grads: &mut ParamSet<T>,
    ) -> Result<()> {
        let depth = self.config.depth;
        let mut dx = {
            let mut dw = take(grads, &self.head.weight)?;
            let dx = conv_backward(
                &dlogits,
                &cache.head,
                params.get(&self.head.weight)?,
                &mut dw,
                grads.get_mut(&self.head.bias)?,
                true,
            )
            .expect("input gradient requested");
            *grads.get_mut(&self.head.weight)? = dw;
            dx
        };
        let mut dskips: Vec<FeatureMap<T>> = Vec::with_capacity(depth);
        for i in 0..depth {
            let stage = &self.decoder[i];
            let c = &cache.decoder[i];
            let dcat = stage
                .block
                .backward(params, grads, &c.block, dx, true)?
                .expect("input gradient requested");
            let (dskip, dup) = split(dcat, self.config.stage_channels(i));
            dskips.push(dskip);
            let dupsampled = conv_relu_backward(&stage.up, params, grads, &c.up, dup, true)?
                .expect("input gradient requested");
            dx = upsample2_backward(&dupsampled);
        }
        for i in (0..=depth).rev() {
            if i < depth {
                let (arg, shape) = &cache.pools[i];
                let mut d = maxpool2_backward(&dx, arg, *shape);
                d.data
                    .iter_mut()
                    .zip(&dskips[i].data)
                    .for_each(|(a, b)| *a += *b);
                dx = d;
            }
            let need = i > 0;
            match self.encoder[i].backward(params, grads, &cache.encoder[i], dx, need)? {
                Some(d) => dx = d,
                None => break,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Role};

    fn cfg(attention: bool) -> ModelConfig {
        ModelConfig {
            depth: 2,
            base_channels: 4,
            attention_enabled: attention,
            ..ModelConfig::default()
        }
    }

    fn image(h: usize, w: usize) -> FeatureMap<f32> {
        FeatureMap::from_vec(
            3,
            h,
            w,
            (0..3 * h * w)
                .map(|i| ((i * 37) % 101) as f32 / 100.0)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn logits_keep_spatial_shape() {
        let c = ModelConfig::default();
        let net = UNet::new(&c);
        let p = init_params::<f32>(&c, 0).unwrap();
        let y = net.forward(&p, &image(64, 64)).unwrap();
        assert_eq!(y.shape(), (2, 64, 64));
        assert!(y.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let c = cfg(true);
        let net = UNet::new(&c);
        let p = init_params::<f32>(&c, 0).unwrap();
        assert!(net.forward(&p, &image(10, 8)).is_err());
        assert!(net.forward(&p, &image(12, 8)).is_ok());
    }

    #[test]
    fn ablation_ignores_attention_params() {
        let off = cfg(false);
        let net = UNet::new(&off);
        let base = init_params::<f32>(&off, 2).unwrap();
        let mut with_extra = init_params::<f32>(&cfg(true), 2).unwrap();
        for (_, t) in with_extra.iter_mut() {
            if t.shape.len() == 2 {
                t.data.iter_mut().for_each(|v| *v = 9.0);
            }
        }
        let img = image(8, 8);
        assert_eq!(
            net.forward(&base, &img).unwrap(),
            net.forward(&with_extra, &img).unwrap()
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let c = cfg(true);
        let net = UNet::new(&c);
        let p = init_params::<f32>(&c, 5).unwrap();
        let img = image(16, 16);
        let a = net.forward(&p, &img).unwrap();
        let b = net.forward(&p, &img).unwrap();
        assert!(a
            .data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn missing_parameter_is_an_error() {
        let c = cfg(true);
        let net = UNet::new(&c);
        let p = ParamSet::<f32>::new(Role::Student);
        assert!(net.forward(&p, &image(8, 8)).is_err());
    }
}
