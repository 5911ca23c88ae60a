//! Hand-built derivation trees of known architectures, used as evolution
//! seeds. Every tree is built from grammar rules and terminals only.

use crate::grammar::Nonterminal::{self, A, B, C, M, P, R, S};
use crate::shape::{Mode, ShapeState};
use crate::terminal::{PermuteOrder, Terminal, LINEAR_WIDTHS};
use crate::tree::{ArchitectureTree, Blueprint, DerivationNode, Head, TreeError};

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum SeedError {
    #[error("seed {name} needs {need}, got input {got}")]
    Input { name: &'static str, need: String, got: ShapeState },
    #[error("seed {name} does not type-check: {source}")]
    Shape { name: &'static str, source: TreeError },
    #[error("unknown seed '{0}'")]
    Unknown(String),
}

/// A named builder with its default blueprint and reference size.
#[derive(Clone, Debug)]
pub struct SeedDescriptor {
    pub name: &'static str,
    pub summary: &'static str,
    pub blueprint: Blueprint,
    /// Published parameter count and relative tolerance, when one exists.
    pub reference_params: Option<(u64, f64)>,
    build: fn(&Blueprint) -> Result<ArchitectureTree, SeedError>,
}

impl SeedDescriptor {
    pub fn build(&self, blueprint: &Blueprint) -> Result<ArchitectureTree, SeedError> {
        (self.build)(blueprint)
    }

    pub fn build_default(&self) -> ArchitectureTree {
        self.build(&self.blueprint).expect("default blueprint builds")
    }
}

fn im64() -> Blueprint {
    Blueprint { input: ShapeState::im(3, 64, 64), head: Head::Classification { classes: 10 } }
}

pub fn catalogue() -> Vec<SeedDescriptor> {
    vec![
        SeedDescriptor {
            name: "conv-block-skip",
            summary: "3x3 conv, norm, relu with an identity skip; input channels must be a linear width",
            blueprint: Blueprint { input: ShapeState::im(16, 16, 16), head: Head::Classification { classes: 4 } },
            reference_params: None,
            build: conv_block_skip_seed,
        },
        SeedDescriptor {
            name: "conv-stem-block",
            summary: "3x3 conv stem to 16 channels, then the skip conv block",
            blueprint: Blueprint { input: ShapeState::im(3, 16, 16), head: Head::Classification { classes: 4 } },
            reference_params: None,
            build: conv_stem_block_seed,
        },
        SeedDescriptor {
            name: "reference-conv",
            summary: "two 3x3 conv, norm, relu layers (16 and 32 channels)",
            blueprint: Blueprint { input: ShapeState::im(3, 16, 16), head: Head::Classification { classes: 4 } },
            reference_params: None,
            build: reference_conv_seed,
        },
        SeedDescriptor {
            name: "resnet18",
            summary: "ResNet18 with a 3x3 stem and a stride-2 conv in place of max-pooling",
            blueprint: im64(),
            reference_params: Some((11_200_000, 0.10)),
            build: resnet18_seed,
        },
        SeedDescriptor {
            name: "wrn16-4",
            summary: "pre-activation WideResNet, depth 16, width multiplier 4",
            blueprint: im64(),
            reference_params: Some((2_800_000, 0.15)),
            build: wrn16_4_seed,
        },
        SeedDescriptor {
            name: "vit",
            summary: "patch-4 ViT, width 512, 4 blocks of 4-head attention and an MLP of width 512",
            blueprint: im64(),
            reference_params: None,
            build: vit_seed,
        },
        SeedDescriptor {
            name: "mixer",
            summary: "patch-4 MLP-Mixer, width 512, 8 blocks; token MLP halves 256 tokens, channel MLP widens 4x",
            blueprint: im64(),
            reference_params: None,
            build: mixer_seed,
        },
    ]
}

pub fn by_name(name: &str) -> Result<SeedDescriptor, SeedError> {
    catalogue().into_iter().find(|s| s.name == name).ok_or_else(|| SeedError::Unknown(name.to_string()))
}

// builders for modules (all return M nodes)

fn c(t: Terminal) -> DerivationNode {
    DerivationNode::internal(M, vec![DerivationNode::pre(C, t)])
}

fn linear(d: u32) -> DerivationNode {
    c(Terminal::Linear { d })
}

/// Chains modules left to right.
fn seq(mut mods: Vec<DerivationNode>) -> DerivationNode {
    let last = mods.pop().expect("non-empty chain");
    mods.into_iter().rev().fold(last, |acc, m| DerivationNode::internal(M, vec![m, acc]))
}

fn route(pre: (Nonterminal, Terminal), inner: DerivationNode, post: Terminal) -> DerivationNode {
    DerivationNode::internal(M, vec![DerivationNode::pre(pre.0, pre.1), inner, DerivationNode::pre(R, post)])
}

/// Two stored branches.
fn branch2(b: Terminal, first: DerivationNode, second: DerivationNode, agg: Terminal) -> DerivationNode {
    DerivationNode::internal(M, vec![DerivationNode::pre(B, b), first, second, DerivationNode::pre(A, agg)])
}

/// One body run once per branch (b in {4, 8}), each replica with its own parameters.
fn branch_rep(b: Terminal, body: DerivationNode, agg: Terminal) -> DerivationNode {
    DerivationNode::internal(M, vec![DerivationNode::pre(B, b), body, DerivationNode::pre(A, agg)])
}

fn residual(body: DerivationNode, shortcut: DerivationNode) -> DerivationNode {
    branch2(Terminal::Clone { b: 2 }, body, shortcut, Terminal::Add)
}

fn identity() -> DerivationNode {
    c(Terminal::Identity)
}

/// im2col, linear, col2im: a k x k convolution with `d` output channels.
fn conv(k: u8, s: u8, p: u8, d: u32) -> DerivationNode {
    route((P, Terminal::Im2col { k, s, p }), linear(d), Terminal::Col2im)
}

fn conv3(s: u8, d: u32) -> DerivationNode {
    conv(3, s, 1, d)
}

fn norm() -> DerivationNode {
    c(Terminal::Norm)
}

fn relu() -> DerivationNode {
    c(Terminal::Relu)
}

fn finish(name: &'static str, body: DerivationNode, bp: &Blueprint) -> Result<ArchitectureTree, SeedError> {
    let mut root = body;
    root.symbol = crate::grammar::Symbol::N(S);
    let mut t = ArchitectureTree::new(root, bp);
    t.annotate().map_err(|source| SeedError::Shape { name, source })?;
    Ok(t)
}

fn need_im(name: &'static str, bp: &Blueprint) -> Result<(usize, usize, usize), SeedError> {
    match (bp.input.mode, bp.input.shape.as_slice()) {
        (Mode::Im, &[c, h, w]) => Ok((c, h, w)),
        _ => Err(SeedError::Input { name, need: "an image input".into(), got: bp.input.clone() }),
    }
}

/// clone(2) -> [im2col, linear, col2im, norm, relu | identity] -> add.
pub fn conv_block_skip(channels: u32) -> DerivationNode {
    residual(seq(vec![conv3(1, channels), norm(), relu()]), identity())
}

/// The skip conv block on its own; the input channel count is kept.
pub fn conv_block_skip_seed(bp: &Blueprint) -> Result<ArchitectureTree, SeedError> {
    let (ch, _, _) = need_im("conv-block-skip", bp)?;
    let d = u32::try_from(ch).ok().filter(|d| LINEAR_WIDTHS.contains(d)).ok_or_else(|| SeedError::Input {
        name: "conv-block-skip",
        need: format!("channels in {LINEAR_WIDTHS:?}"),
        got: bp.input.clone(),
    })?;
    finish("conv-block-skip", conv_block_skip(d), bp)
}

pub fn conv_stem_block_seed(bp: &Blueprint) -> Result<ArchitectureTree, SeedError> {
    need_im("conv-stem-block", bp)?;
    finish("conv-stem-block", seq(vec![conv3(1, 16), norm(), relu(), conv_block_skip(16)]), bp)
}

pub fn reference_conv_seed(bp: &Blueprint) -> Result<ArchitectureTree, SeedError> {
    need_im("reference-conv", bp)?;
    finish("reference-conv", seq(vec![conv3(1, 16), norm(), relu(), conv3(1, 32), norm(), relu()]), bp)
}

/// Post-activation basic block; a strided or widening block gets a 1x1 conv shortcut.
fn basic_block(stride: u8, width: u32, widen: bool) -> DerivationNode {
    let body = seq(vec![conv3(stride, width), norm(), relu(), conv3(1, width), norm()]);
    let shortcut = if stride > 1 || widen { seq(vec![conv(1, stride, 0, width), norm()]) } else { identity() };
    seq(vec![residual(body, shortcut), relu()])
}

/// Four stages of two basic blocks (64/128/256/512), stride 2 from the second stage.
pub fn resnet18_seed(bp: &Blueprint) -> Result<ArchitectureTree, SeedError> {
    need_im("resnet18", bp)?;
    let mut mods = vec![conv3(1, 64), norm(), relu(), conv3(2, 64), norm(), relu()];
    for (i, width) in [64u32, 128, 256, 512].into_iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        mods.push(basic_block(stride, width, i > 0));
        mods.push(basic_block(1, width, false));
    }
    finish("resnet18", seq(mods), bp)
}

/// Pre-activation wide block: norm, relu, conv, norm, relu, conv.
fn wide_block(stride: u8, width: u32, project: bool) -> DerivationNode {
    let body = seq(vec![norm(), relu(), conv3(stride, width), norm(), relu(), conv3(1, width)]);
    let shortcut = if project { conv(1, stride, 0, width) } else { identity() };
    residual(body, shortcut)
}

/// Depth 16 = 3 stages of 2 blocks (widths 64/128/256) plus stem and head.
pub fn wrn16_4_seed(bp: &Blueprint) -> Result<ArchitectureTree, SeedError> {
    need_im("wrn16-4", bp)?;
    let mut mods = vec![conv3(1, 16)];
    for (i, width) in [64u32, 128, 256].into_iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        mods.push(wide_block(stride, width, true));
        mods.push(wide_block(1, width, false));
    }
    mods.push(norm());
    mods.push(relu());
    finish("wrn16-4", seq(mods), bp)
}

/// Patch embedding: im2col with k = s = 4, a linear map, identity routing back.
fn patch_embed(width: u32) -> DerivationNode {
    route((P, Terminal::Im2col { k: 4, s: 4, p: 0 }), linear(width), Terminal::Identity)
}

/// One attention head on a (S, 128) slice: softmax(q k^T / sqrt(d)) v.
fn attention_head(d: u32) -> DerivationNode {
    let scores = branch2(Terminal::Clone { b: 2 }, linear(d), linear(d), Terminal::Matmul { scaled: true });
    let weights = seq(vec![scores, c(Terminal::Softmax)]);
    branch2(Terminal::Clone { b: 2 }, weights, linear(d), Terminal::Matmul { scaled: false })
}

/// Four heads over channel groups, concatenated and projected.
fn multi_head(width: u32) -> DerivationNode {
    let heads = branch_rep(Terminal::Group { dim: 2, b: 4 }, attention_head(width / 4), Terminal::Concat { dim: 2, b: 4 });
    seq(vec![heads, linear(width)])
}

pub fn vit_seed(bp: &Blueprint) -> Result<ArchitectureTree, SeedError> {
    need_im("vit", bp)?;
    let width = 512;
    let mut mods = vec![patch_embed(width), c(Terminal::PosEnc)];
    for _ in 0..4 {
        mods.push(residual(seq(vec![norm(), multi_head(width)]), identity()));
        mods.push(residual(seq(vec![norm(), linear(width), relu(), linear(width)]), identity()));
    }
    mods.push(norm());
    finish("vit", seq(mods), bp)
}

fn transpose() -> Terminal {
    Terminal::Permute { order: PermuteOrder::new(&[2, 1]).expect("valid order") }
}

pub fn mixer_seed(bp: &Blueprint) -> Result<ArchitectureTree, SeedError> {
    let (_, h, w) = need_im("mixer", bp)?;
    let width = 512;
    let tokens = ((h / 4) * (w / 4)) as u32;
    let mut mods = vec![patch_embed(width)];
    for _ in 0..8 {
        // token mixing acts on the transposed (D, S) layout
        let token_mlp = seq(vec![linear(tokens / 2), relu(), linear(tokens)]);
        let token = seq(vec![norm(), route((P, transpose()), token_mlp, transpose())]);
        mods.push(residual(token, identity()));
        mods.push(residual(seq(vec![norm(), linear(4 * width), relu(), linear(width)]), identity()));
    }
    mods.push(norm());
    finish("mixer", seq(mods), bp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{build_grammar, Variant};
    use crate::sampling::SampleLimits;

    #[test]
    fn conv_block_matches_the_figure() {
        let t = by_name("conv-block-skip").unwrap().build_default();
        assert_eq!(t.leaf_names(), ["clone", "im2col", "linear", "col2im", "norm", "relu", "identity", "add"]);
        // 3x3, stride 1, pad 1 and width = channels keep the shape
        assert_eq!(t.output_state().unwrap(), &t.input);
    }

    #[test]
    fn every_seed_validates() {
        let g = build_grammar(Variant::TwoD, 0.32).unwrap();
        for s in catalogue() {
            let t = s.build_default();
            t.validate(&g, &s.blueprint.input, &SampleLimits::default()).unwrap_or_else(|v| panic!("{}: {v:?}", s.name));
        }
    }

    #[test]
    fn resnet_threads_strides() {
        let t = by_name("resnet18").unwrap().build_default();
        assert_eq!(t.output_state().unwrap(), &ShapeState::im(512, 4, 4));
    }

    #[test]
    fn reference_counts() {
        for s in catalogue() {
            if let Some((n, tol)) = s.reference_params {
                let got = s.build_default().count_parameters().unwrap() as f64;
                assert!((got - n as f64).abs() <= tol * n as f64, "{}: {got}", s.name);
            }
        }
    }

    #[test]
    fn vit_attention_puts_softmax_between_matmuls() {
        let names = by_name("vit").unwrap().build_default().leaf_names();
        let s = names.iter().position(|&n| n == "softmax").unwrap();
        assert!(names[..s].contains(&"matmul"));
        assert!(names[s..].contains(&"matmul"));
    }

    #[test]
    fn rejects_wrong_inputs() {
        let bp = Blueprint { input: ShapeState::col(8, 8), head: Head::Classification { classes: 2 } };
        assert!(matches!(resnet18_seed(&bp), Err(SeedError::Input { .. })));
        let bp = Blueprint { input: ShapeState::im(3, 8, 8), head: Head::Classification { classes: 2 } };
        assert!(matches!(conv_block_skip_seed(&bp), Err(SeedError::Input { .. })));
        assert!(matches!(by_name("lenet"), Err(SeedError::Unknown(_))));
    }
}
