//! Closed-form trainable-parameter counts from layer hyperparameters.
//! Kept independent of the built tensors so the two can be cross-checked.

use crate::model::{ScaledModule, BOX_OBJ_CHANNELS};

/// Conv without bias plus batchnorm scale and shift.
pub fn cbs(c1: usize, c2: usize, k: usize, g: usize) -> usize {
    k * k * (c1 / g) * c2 + 2 * c2
}

fn hidden(c: usize, e: f64) -> usize {
    (c as f64 * e) as usize
}

fn bottleneck(c1: usize, c2: usize, k: usize, e: f64) -> usize {
    let h = hidden(c2, e);
    cbs(c1, h, k, 1) + cbs(h, c2, k, 1)
}

fn c3k(c1: usize, c2: usize) -> usize {
    let h = hidden(c2, 0.5);
    2 * cbs(c1, h, 1, 1) + cbs(2 * h, c2, 1, 1) + 2 * bottleneck(h, h, 3, 1.0)
}

/// Split-accumulate CSP shell around `n` units of `unit` params each.
fn csp(c1: usize, c2: usize, n: usize, e: f64, unit: impl Fn(usize) -> usize) -> usize {
    let c = hidden(c2, e);
    cbs(c1, 2 * c, 1, 1) + cbs((2 + n) * c, c2, 1, 1) + n * unit(c)
}

fn attention(c: usize) -> usize {
    let heads = (c / 64).max(1);
    let key_dim = c / heads / 2;
    cbs(c, c + 2 * key_dim * heads, 1, 1) + cbs(c, c, 1, 1) + cbs(c, c, 3, c)
}

fn psa(c: usize) -> usize {
    attention(c) + cbs(c, 2 * c, 1, 1) + cbs(2 * c, c, 1, 1)
}

fn detect(channels: &[usize], nc: usize, dw: bool) -> usize {
    let c_box = (channels[0] / 4).max(64);
    let c_cls = channels[0].max(nc.min(100));
    channels
        .iter()
        .map(|&c| {
            let box_branch = cbs(c, c_box, 3, 1) + cbs(c_box, c_box, 3, 1) + (c_box + 1) * BOX_OBJ_CHANNELS;
            let cls_branch = if dw {
                cbs(c, c, 3, c) + cbs(c, c_cls, 1, 1) + cbs(c_cls, c_cls, 3, c_cls) + cbs(c_cls, c_cls, 1, 1)
            } else {
                cbs(c, c_cls, 3, 1) + cbs(c_cls, c_cls, 3, 1)
            };
            box_branch + cls_branch + (c_cls + 1) * nc
        })
        .sum()
}

/// Trainable parameters of one layer given its input channel counts.
pub fn layer_params(module: &ScaledModule, c_in: &[usize]) -> usize {
    let c1 = c_in[0];
    match *module {
        ScaledModule::Conv { c_out, k, g, .. } => cbs(c1, c_out, k, g),
        ScaledModule::C2f { c_out, n, e, .. } => csp(c1, c_out, n, e, |c| bottleneck(c, c, 3, 1.0)),
        ScaledModule::C3k2 {
            c_out, n, c3k: true, e, ..
        } => csp(c1, c_out, n, e, |c| c3k(c, c)),
        ScaledModule::C3k2 { c_out, n, e, .. } => csp(c1, c_out, n, e, |c| bottleneck(c, c, 3, 1.0)),
        ScaledModule::Sppf { c_out, .. } => cbs(c1, c1 / 2, 1, 1) + cbs(4 * (c1 / 2), c_out, 1, 1),
        ScaledModule::C2psa { c, n, e } => {
            let h = hidden(c, e);
            cbs(c, 2 * h, 1, 1) + cbs(2 * h, c, 1, 1) + n * psa(h)
        }
        ScaledModule::Upsample | ScaledModule::Concat => 0,
        ScaledModule::Detect { nc, dw } => detect(c_in, nc, dw),
        ScaledModule::Classify { hidden, nc } => cbs(c1, hidden, 1, 1) + (hidden + 1) * nc,
    }
}
