//! The three sub-networks.

use lwe_core::bilateral::GridSpec;

use super::graph::{Activation, GraphBuilder, NetworkGraph};
use crate::error::Result;

pub const ILLUMINATION: &str = "illumination";
pub const FUSION: &str = "fusion";
pub const RESTORATION: &str = "restoration";

/// Bright channel in, illumination map out.
///
/// Works at quarter resolution (space-to-depth, then a strided conv) and is
/// brought back to full size by a bilateral slice guided by the input.
/// Outputs `illum_low` (sigmoid, quarter size) and `illum` (full size).
pub fn illumination_net(spec: GridSpec) -> Result<NetworkGraph> {
    let mut b = GraphBuilder::new(ILLUMINATION);
    let bright = b.input("bright", 1);
    let s2d = b.space_to_depth("s2d", bright)?;
    let c1 = b.conv_relu("conv1", s2d, 3, 8, 1)?;
    let c2 = b.conv_relu("conv2", c1, 3, 8, 2)?;
    let c3 = b.conv_relu("conv3", c2, 3, 4, 1)?;
    let c4 = b.conv("head", c3, 1, 1, 1)?;
    let low = b.activation("head_sigmoid", c4, Activation::Sigmoid)?;
    let full = b.bilateral_slice("slice", low, bright, spec)?;
    b.output("illum_low", low)?;
    b.output("illum", full)?;
    b.build()
}

/// Concatenated `(I, I_U, I_O)` in, per-pixel softmax weights out.
pub fn fusion_net() -> Result<NetworkGraph> {
    let mut b = GraphBuilder::new(FUSION);
    let x = b.input("stack", 9);
    let e1 = b.conv_relu("enc1", x, 3, 6, 1)?;
    let p = b.avgpool2x("pool", e1)?;
    let e2 = b.conv_relu("enc2", p, 3, 6, 1)?;
    let up = b.upsample2x("up", e2)?;
    let cat = b.concat("skip", &[e1, up])?;
    let d = b.conv_relu("dec", cat, 3, 6, 1)?;
    let logits = b.conv("head", d, 1, 3, 1)?;
    let w = b.activation("softmax", logits, Activation::Softmax)?;
    b.output("weights", w)?;
    b.build()
}

/// `2 R - 1` in, noise-and-detail residual out (unbounded).
///
/// Three branches of depth one, two and three share a stem; each deeper
/// branch adds the previous branch's activations before its next conv, and
/// 1x1 heads on the three branch ends are summed.
pub fn restoration_net() -> Result<NetworkGraph> {
    let mut b = GraphBuilder::new(RESTORATION);
    let z = b.input("centered", 3);
    let s = b.conv_relu("stem", z, 3, 4, 1)?;
    let b1 = b.conv_relu("b1", s, 3, 4, 1)?;
    let b2a = b.conv_relu("b2a", s, 3, 4, 1)?;
    let m2 = b.add("b2_mix", &[b2a, b1])?;
    let b2b = b.conv_relu("b2b", m2, 3, 4, 1)?;
    let b3a = b.conv_relu("b3a", s, 3, 4, 1)?;
    let m3a = b.add("b3_mix1", &[b3a, b2a])?;
    let b3b = b.conv_relu("b3b", m3a, 3, 4, 1)?;
    let m3b = b.add("b3_mix2", &[b3b, b2b])?;
    let b3c = b.conv_relu("b3c", m3b, 3, 4, 1)?;
    let h1 = b.conv("head1", b1, 1, 3, 1)?;
    let h2 = b.conv("head2", b2b, 1, 3, 1)?;
    let h3 = b.conv("head3", b3c, 1, 3, 1)?;
    let out = b.add("sum", &[h1, h2, h3])?;
    b.output("residual", out)?;
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    // sum of kh*kw*cin*cout + cout written out per layer
    #[test]
    fn parameter_counts() {
        let il = 9 * 4 * 8 + 8 + 9 * 8 * 8 + 8 + 9 * 8 * 4 + 4 + 4 + 1;
        let fu = 9 * 9 * 6 + 6 + 9 * 6 * 6 + 6 + 9 * 12 * 6 + 6 + 6 * 3 + 3;
        let re = 9 * 3 * 4 + 4 + 6 * (9 * 4 * 4 + 4) + 3 * (4 * 3 + 3);
        assert_eq!((il, fu, re), (1177, 1497, 1045));
        assert_eq!(illumination_net(GridSpec::default()).unwrap().param_count(), il);
        assert_eq!(fusion_net().unwrap().param_count(), fu);
        assert_eq!(restoration_net().unwrap().param_count(), re);
    }

    #[test]
    fn shapes_follow_the_input() {
        let g = illumination_net(GridSpec::default()).unwrap();
        let s = g.infer_shapes(&[(64, 48)]).unwrap();
        assert_eq!(s[g.output("illum_low").unwrap()], (16, 12));
        assert_eq!(s[g.output("illum").unwrap()], (64, 48));
        assert!(g.infer_shapes(&[(6, 7)]).is_err());
    }
}
