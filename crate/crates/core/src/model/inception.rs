//! Inception-V3 fusion trunk.
//!
//! Layer names, branch structure and widths follow the reference topology;
//! widths can be divided by a constant and valid-mode windows can be padded
//! for small inputs. The first conv takes the concatenated two-stream
//! features instead of RGB.

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::kernels::{out_extent, ConvGeom, PoolGeom};
use crate::nnblocks::{Builder, ConvBnRelu};

#[derive(Debug, Clone, Copy)]
enum PoolKind {
    /// 3x3 stride-1 average pool with padding 1.
    Avg,
    /// 3x3 stride-2 max pool.
    Max,
}

#[derive(Debug, Clone)]
struct Branch {
    pool: Option<PoolKind>,
    convs: Vec<ConvBnRelu>,
    /// Parallel pair applied to the last output and concatenated.
    split: Option<(ConvBnRelu, ConvBnRelu)>,
}

#[derive(Debug, Clone)]
struct Mixed {
    branches: Vec<Branch>,
}

/// Tracks spatial size while declaring layers so that a collapsing trunk is
/// reported at construction.
struct Plan<'b, 'a> {
    b: &'b mut Builder<'a>,
    div: usize,
    same: bool,
    eps: f64,
    size: (usize, usize),
    /// Name of the mixed block being declared, if any.
    block: String,
}

impl Plan<'_, '_> {
    fn width(&self, w: usize) -> usize {
        (w / self.div).max(1)
    }

    fn step(&self, name: &str, size: (usize, usize), k: (usize, usize), s: usize, p: (usize, usize)) -> Result<(usize, usize)> {
        match (out_extent(size.0, k.0, s, p.0), out_extent(size.1, k.1, s, p.1)) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok((h, w)),
            _ => Err(Error::Config(format!(
                "fusion trunk collapses at {name} for a {}x{} input; enable backbone_same_padding or enlarge input_size",
                size.0, size.1
            ))),
        }
    }

    /// Declare a conv and return it with its output size. `valid` marks the
    /// reference's unpadded windows, which are padded in same mode.
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        size: (usize, usize),
        cin: usize,
        cout: usize,
        k: (usize, usize),
        stride: usize,
        pad: (usize, usize),
    ) -> Result<(ConvBnRelu, (usize, usize))> {
        let pad = if self.same { (k.0 / 2, k.1 / 2) } else { pad };
        let out = self.step(name, size, k, stride, pad)?;
        let geom = ConvGeom::new(stride, 0).with_padding(pad.0, pad.1);
        let full = if self.block.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.block)
        };
        let layer = ConvBnRelu::new(self.b, &full, cin, cout, k, geom, self.eps);
        Ok((layer, out))
    }

    fn max_pool_geom(&self) -> PoolGeom {
        PoolGeom::new(3, 2, usize::from(self.same))
    }
}

/// One branch description: `(name, out_width, kernel, stride, padding)`.
type ConvSpec = (&'static str, usize, (usize, usize), usize, (usize, usize));

impl Branch {
    fn build(plan: &mut Plan, cin: usize, pool: Option<PoolKind>, specs: &[ConvSpec]) -> Result<(Branch, usize, (usize, usize))> {
        let mut size = plan.size;
        if let Some(PoolKind::Max) = pool {
            let g = plan.max_pool_geom();
            size = plan.step("max pool", size, g.kernel, 2, g.padding)?;
        }
        let mut c = cin;
        let mut convs = Vec::new();
        for &(name, w, k, s, p) in specs {
            let cout = plan.width(w);
            let (layer, out) = plan.conv(name, size, c, cout, k, s, p)?;
            convs.push(layer);
            size = out;
            c = cout;
        }
        Ok((
            Branch {
                pool,
                convs,
                split: None,
            },
            c,
            size,
        ))
    }

    fn with_split(mut self, plan: &mut Plan, cin: usize, size: (usize, usize), names: (&str, &str), w: usize) -> Result<(Branch, usize)> {
        let cout = plan.width(w);
        let (a, _) = plan.conv(names.0, size, cin, cout, (1, 3), 1, (0, 1))?;
        let (b, _) = plan.conv(names.1, size, cin, cout, (3, 1), 1, (1, 0))?;
        self.split = Some((a, b));
        Ok((self, 2 * cout))
    }

    fn forward(&self, g: &mut Graph, x: NodeId, max_pool: PoolGeom) -> NodeId {
        let mut y = x;
        match self.pool {
            Some(PoolKind::Avg) => y = g.avg_pool2d(y, PoolGeom::new(3, 1, 1)),
            Some(PoolKind::Max) => y = g.max_pool2d(y, max_pool),
            None => {}
        }
        for c in &self.convs {
            y = c.forward(g, y);
        }
        if let Some((a, b)) = &self.split {
            let ya = a.forward(g, y);
            let yb = b.forward(g, y);
            y = g.concat(&[ya, yb], 1);
        }
        y
    }
}

impl Mixed {
    fn forward(&self, g: &mut Graph, x: NodeId, max_pool: PoolGeom) -> NodeId {
        let outs: Vec<NodeId> = self.branches.iter().map(|b| b.forward(g, x, max_pool)).collect();
        g.concat(&outs, 1)
    }
}

fn inception_a(plan: &mut Plan, cin: usize, pool_features: usize) -> Result<(Mixed, usize)> {
    let (b1, c1, _) = Branch::build(plan, cin, None, &[("branch1x1", 64, (1, 1), 1, (0, 0))])?;
    let (b2, c2, _) = Branch::build(
        plan,
        cin,
        None,
        &[("branch5x5_1", 48, (1, 1), 1, (0, 0)), ("branch5x5_2", 64, (5, 5), 1, (2, 2))],
    )?;
    let (b3, c3, _) = Branch::build(
        plan,
        cin,
        None,
        &[
            ("branch3x3dbl_1", 64, (1, 1), 1, (0, 0)),
            ("branch3x3dbl_2", 96, (3, 3), 1, (1, 1)),
            ("branch3x3dbl_3", 96, (3, 3), 1, (1, 1)),
        ],
    )?;
    let (b4, c4, _) = Branch::build(
        plan,
        cin,
        Some(PoolKind::Avg),
        &[("branch_pool", pool_features, (1, 1), 1, (0, 0))],
    )?;
    Ok((Mixed { branches: vec![b1, b2, b3, b4] }, c1 + c2 + c3 + c4))
}

fn inception_b(plan: &mut Plan, cin: usize) -> Result<(Mixed, usize, (usize, usize))> {
    let (b1, c1, size) = Branch::build(plan, cin, None, &[("branch3x3", 384, (3, 3), 2, (0, 0))])?;
    let (b2, c2, _) = Branch::build(
        plan,
        cin,
        None,
        &[
            ("branch3x3dbl_1", 64, (1, 1), 1, (0, 0)),
            ("branch3x3dbl_2", 96, (3, 3), 1, (1, 1)),
            ("branch3x3dbl_3", 96, (3, 3), 2, (0, 0)),
        ],
    )?;
    let (b3, _, _) = Branch::build(plan, cin, Some(PoolKind::Max), &[])?;
    Ok((Mixed { branches: vec![b1, b2, b3] }, c1 + c2 + cin, size))
}

fn inception_c(plan: &mut Plan, cin: usize, c7: usize) -> Result<(Mixed, usize)> {
    let (b1, c1, _) = Branch::build(plan, cin, None, &[("branch1x1", 192, (1, 1), 1, (0, 0))])?;
    let (b2, c2, _) = Branch::build(
        plan,
        cin,
        None,
        &[
            ("branch7x7_1", c7, (1, 1), 1, (0, 0)),
            ("branch7x7_2", c7, (1, 7), 1, (0, 3)),
            ("branch7x7_3", 192, (7, 1), 1, (3, 0)),
        ],
    )?;
    let (b3, c3, _) = Branch::build(
        plan,
        cin,
        None,
        &[
            ("branch7x7dbl_1", c7, (1, 1), 1, (0, 0)),
            ("branch7x7dbl_2", c7, (7, 1), 1, (3, 0)),
            ("branch7x7dbl_3", c7, (1, 7), 1, (0, 3)),
            ("branch7x7dbl_4", c7, (7, 1), 1, (3, 0)),
            ("branch7x7dbl_5", 192, (1, 7), 1, (0, 3)),
        ],
    )?;
    let (b4, c4, _) = Branch::build(plan, cin, Some(PoolKind::Avg), &[("branch_pool", 192, (1, 1), 1, (0, 0))])?;
    Ok((Mixed { branches: vec![b1, b2, b3, b4] }, c1 + c2 + c3 + c4))
}

fn inception_d(plan: &mut Plan, cin: usize) -> Result<(Mixed, usize, (usize, usize))> {
    let (b1, c1, size) = Branch::build(
        plan,
        cin,
        None,
        &[("branch3x3_1", 192, (1, 1), 1, (0, 0)), ("branch3x3_2", 320, (3, 3), 2, (0, 0))],
    )?;
    let (b2, c2, _) = Branch::build(
        plan,
        cin,
        None,
        &[
            ("branch7x7x3_1", 192, (1, 1), 1, (0, 0)),
            ("branch7x7x3_2", 192, (1, 7), 1, (0, 3)),
            ("branch7x7x3_3", 192, (7, 1), 1, (3, 0)),
            ("branch7x7x3_4", 192, (3, 3), 2, (0, 0)),
        ],
    )?;
    let (b3, _, _) = Branch::build(plan, cin, Some(PoolKind::Max), &[])?;
    Ok((Mixed { branches: vec![b1, b2, b3] }, c1 + c2 + cin, size))
}

fn inception_e(plan: &mut Plan, cin: usize) -> Result<(Mixed, usize)> {
    let size = plan.size;
    let (b1, c1, _) = Branch::build(plan, cin, None, &[("branch1x1", 320, (1, 1), 1, (0, 0))])?;
    let (b2, c, _) = Branch::build(plan, cin, None, &[("branch3x3_1", 384, (1, 1), 1, (0, 0))])?;
    let (b2, c2) = b2.with_split(plan, c, size, ("branch3x3_2a", "branch3x3_2b"), 384)?;
    let (b3, c, _) = Branch::build(
        plan,
        cin,
        None,
        &[("branch3x3dbl_1", 448, (1, 1), 1, (0, 0)), ("branch3x3dbl_2", 384, (3, 3), 1, (1, 1))],
    )?;
    let (b3, c3) = b3.with_split(plan, c, size, ("branch3x3dbl_3a", "branch3x3dbl_3b"), 384)?;
    let (b4, c4, _) = Branch::build(plan, cin, Some(PoolKind::Avg), &[("branch_pool", 192, (1, 1), 1, (0, 0))])?;
    Ok((Mixed { branches: vec![b1, b2, b3, b4] }, c1 + c2 + c3 + c4))
}

#[derive(Debug, Clone)]
pub struct InceptionV3 {
    stem: Vec<(ConvBnRelu, bool)>,
    mixed: Vec<Mixed>,
    max_pool: PoolGeom,
    in_channels: usize,
    out_channels: usize,
    out_size: (usize, usize),
}

impl InceptionV3 {
    pub fn new(
        b: &mut Builder,
        name: &str,
        in_channels: usize,
        input: (usize, usize),
        width_divisor: usize,
        same_padding: bool,
        bn_eps: f64,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            let mut plan = Plan {
                b,
                div: width_divisor.max(1),
                same: same_padding,
                eps: bn_eps,
                size: input,
                block: String::new(),
            };
            let mut stem = Vec::new();
            let mut c = in_channels;
            // (name, width, kernel, stride, padding, max pool afterwards)
            let stem_specs: [(&str, usize, usize, usize, usize, bool); 5] = [
                ("Conv2d_1a_3x3", 32, 3, 2, 0, false),
                ("Conv2d_2a_3x3", 32, 3, 1, 0, false),
                ("Conv2d_2b_3x3", 64, 3, 1, 1, true),
                ("Conv2d_3b_1x1", 80, 1, 1, 0, false),
                ("Conv2d_4a_3x3", 192, 3, 1, 0, true),
            ];
            for (lname, w, k, s, p, pool) in stem_specs {
                let cout = plan.width(w);
                let (layer, size) = plan.conv(lname, plan.size, c, cout, (k, k), s, (p, p))?;
                plan.size = size;
                if pool {
                    let g = plan.max_pool_geom();
                    plan.size = plan.step(&format!("max pool after {lname}"), plan.size, g.kernel, 2, g.padding)?;
                }
                stem.push((layer, pool));
                c = cout;
            }

            let mut mixed = Vec::new();
            for (block, pf) in [("Mixed_5b", 32), ("Mixed_5c", 64), ("Mixed_5d", 64)] {
                plan.block = block.to_string();
                let (m, cout) = inception_a(&mut plan, c, pf)?;
                mixed.push(m);
                c = cout;
            }
            plan.block = "Mixed_6a".into();
            let (m, cout, size) = inception_b(&mut plan, c)?;
            mixed.push(m);
            c = cout;
            plan.size = size;
            for (block, c7) in [("Mixed_6b", 128), ("Mixed_6c", 160), ("Mixed_6d", 160), ("Mixed_6e", 192)] {
                plan.block = block.to_string();
                let (m, cout) = inception_c(&mut plan, c, c7)?;
                mixed.push(m);
                c = cout;
            }
            plan.block = "Mixed_7a".into();
            let (m, cout, size) = inception_d(&mut plan, c)?;
            mixed.push(m);
            c = cout;
            plan.size = size;
            for block in ["Mixed_7b", "Mixed_7c"] {
                plan.block = block.to_string();
                let (m, cout) = inception_e(&mut plan, c)?;
                mixed.push(m);
                c = cout;
            }
            Ok(InceptionV3 {
                stem,
                mixed,
                max_pool: plan.max_pool_geom(),
                in_channels,
                out_channels: c,
                out_size: plan.size,
            })
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Spatial extent of the final feature map.
    pub fn out_size(&self) -> (usize, usize) {
        self.out_size
    }

    /// `[N, C_in, H, W] -> [N, C_out, h, w]` before global pooling.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::shape("fusion trunk input", format!("[N, {}, H, W]", self.in_channels), s));
        }
        let mut y = x;
        for (layer, pool) in &self.stem {
            y = layer.forward(g, y);
            if *pool {
                y = g.max_pool2d(y, self.max_pool);
            }
        }
        for m in &self.mixed {
            y = m.forward(g, y, self.max_pool);
        }
        Ok(y)
    }
}
