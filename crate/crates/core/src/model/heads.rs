//! Prediction heads.

use crate::blocks::{join, Activation, Backend, Cbs, ParamMut, ParamRef, Params, PlainConv};
use crate::tensor::Result;

/// Box (4) plus objectness (1) channels at the front of every detect map.
pub const BOX_OBJ_CHANNELS: usize = 5;

/// Conv stack ending in a biased 1×1 prediction conv.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub stack: Vec<Cbs>,
    pub out: PlainConv,
    /// Stack entries are grouped in pairs (`j.0`, `j.1`) when naming.
    pub paired: bool,
}

impl Branch {
    fn plain(c_in: usize, hidden: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            stack: vec![Cbs::new(c_in, hidden, 3, 1)?, Cbs::new(hidden, hidden, 3, 1)?],
            out: PlainConv::new(hidden, c_out, 1)?,
            paired: false,
        })
    }

    /// Depthwise 3×3 then pointwise, twice.
    fn depthwise(c_in: usize, hidden: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            stack: vec![
                Cbs::grouped(c_in, c_in, 3, 1, c_in, Activation::Silu)?,
                Cbs::new(c_in, hidden, 1, 1)?,
                Cbs::grouped(hidden, hidden, 3, 1, hidden, Activation::Silu)?,
                Cbs::new(hidden, hidden, 1, 1)?,
            ],
            out: PlainConv::new(hidden, c_out, 1)?,
            paired: true,
        })
    }

    fn forward<B: Backend>(&self, be: &mut B, x: &B::Value) -> Result<B::Value> {
        let mut y = self.stack[0].forward(be, x)?;
        for c in &self.stack[1..] {
            y = c.forward(be, &y)?;
        }
        self.out.forward(be, &y)
    }

    fn name(&self, j: usize) -> String {
        if self.paired {
            format!("{}.{}", j / 2, j % 2)
        } else {
            j.to_string()
        }
    }

    fn out_name(&self) -> String {
        let len = if self.paired {
            self.stack.len() / 2
        } else {
            self.stack.len()
        };
        len.to_string()
    }
}

impl Params for Branch {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRef<'_>)) {
        for (j, c) in self.stack.iter().enumerate() {
            c.visit_params(&join(prefix, &self.name(j)), f);
        }
        self.out.visit_params(&join(prefix, &self.out_name()), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        let names: Vec<String> = (0..self.stack.len()).map(|j| self.name(j)).collect();
        let out_name = self.out_name();
        for (c, name) in self.stack.iter_mut().zip(&names) {
            c.visit_params_mut(&join(prefix, name), f);
        }
        self.out.visit_params_mut(&join(prefix, &out_name), f);
    }
}

/// Per-level box/objectness and class branches. Each level emits
/// `[box(4), objectness(1), classes(nc)]` raw values.
#[derive(Clone, Debug, PartialEq)]
pub struct Detect {
    pub nc: usize,
    pub box_branches: Vec<Branch>,
    pub cls_branches: Vec<Branch>,
}

impl Detect {
    /// `channels` are the input widths of the three levels, finest first.
    pub fn new(channels: &[usize], nc: usize, dw: bool) -> Result<Self> {
        let c_box = (channels[0] / 4).max(64);
        let c_cls = channels[0].max(nc.min(100));
        let mut box_branches = Vec::new();
        let mut cls_branches = Vec::new();
        for &c in channels {
            box_branches.push(Branch::plain(c, c_box, BOX_OBJ_CHANNELS)?);
            cls_branches.push(if dw {
                Branch::depthwise(c, c_cls, nc)?
            } else {
                Branch::plain(c, c_cls, nc)?
            });
        }
        Ok(Self {
            nc,
            box_branches,
            cls_branches,
        })
    }

    pub fn forward<B: Backend>(&self, be: &mut B, xs: &[&B::Value]) -> Result<Vec<B::Value>> {
        let mut maps = Vec::with_capacity(xs.len());
        for ((x, b), c) in xs.iter().zip(&self.box_branches).zip(&self.cls_branches) {
            let box_obj = b.forward(be, x)?;
            let cls = c.forward(be, x)?;
            maps.push(be.concat(&[&box_obj, &cls])?);
        }
        Ok(maps)
    }
}

impl Params for Detect {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRef<'_>)) {
        for (l, b) in self.box_branches.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("cv2.{l}")), f);
        }
        for (l, b) in self.cls_branches.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("cv3.{l}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        for (l, b) in self.box_branches.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("cv2.{l}")), f);
        }
        for (l, b) in self.cls_branches.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("cv3.{l}")), f);
        }
    }
}

/// 1×1 CBS expansion, global average pool, linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Classify {
    pub conv: Cbs,
    pub linear: PlainConv,
}

impl Classify {
    pub fn new(c_in: usize, hidden: usize, nc: usize) -> Result<Self> {
        Ok(Self {
            conv: Cbs::new(c_in, hidden, 1, 1)?,
            linear: PlainConv::new(hidden, nc, 1)?,
        })
    }

    /// Logits shaped `(n, nc, 1, 1)`.
    pub fn forward<B: Backend>(&self, be: &mut B, x: &B::Value) -> Result<B::Value> {
        let y = self.conv.forward(be, x)?;
        let y = be.global_avgpool(&y)?;
        self.linear.forward(be, &y)
    }
}

impl Params for Classify {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRef<'_>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.linear.visit_params(&join(prefix, "linear"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        self.conv.visit_params_mut(&join(prefix, "conv"), f);
        self.linear.visit_params_mut(&join(prefix, "linear"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::Eager;
    use crate::tensor::Tensor4;

    #[test]
    fn detect_names_follow_branch_layout() {
        let d = Detect::new(&[16, 32, 64], 3, true).unwrap();
        let mut names = Vec::new();
        d.visit_params("model.9", &mut |n, _| names.push(n.to_string()));
        assert!(names.contains(&"model.9.cv2.0.0.conv.weight".to_string()));
        assert!(names.contains(&"model.9.cv2.2.2.bias".to_string()));
        assert!(names.contains(&"model.9.cv3.1.0.1.bn.running_var".to_string()));
        assert!(names.contains(&"model.9.cv3.1.2.weight".to_string()));
        let plain = Detect::new(&[16, 32, 64], 3, false).unwrap();
        let mut names = Vec::new();
        plain.visit_params("", &mut |n, _| names.push(n.to_string()));
        assert!(names.contains(&"cv3.0.1.conv.weight".to_string()));
    }

    #[test]
    fn detect_maps_have_box_obj_and_classes() {
        let d = Detect::new(&[8, 16, 24], 2, false).unwrap();
        let xs = [
            Tensor4::zeros([1, 8, 8, 8]),
            Tensor4::zeros([1, 16, 4, 4]),
            Tensor4::zeros([1, 24, 2, 2]),
        ];
        let maps = d.forward(&mut Eager, &[&xs[0], &xs[1], &xs[2]]).unwrap();
        assert_eq!(maps[0].shape(), [1, 7, 8, 8]);
        assert_eq!(maps[2].shape(), [1, 7, 2, 2]);
    }

    #[test]
    fn classify_param_count() {
        let c = Classify::new(32, 64, 10).unwrap();
        assert_eq!(c.param_count(), 32 * 64 + 2 * 64 + 64 * 10 + 10);
    }
}
