//! Property-based tests for the translator and mask rasterizer: invariants
//! that must hold for arbitrary critiques and regions, not just fixtures.

use proptest::prelude::*;

use lumigen::model::{
    canonical_json, Critique, Dimension, ImageArtifact, Issue, Region, RunConfig,
    SignalPayload,
};
use lumigen::translator::{rasterize_region, targeted_dimensions, translate};

fn dimension() -> impl Strategy<Value = Dimension> {
    (0usize..9).prop_map(|i| Dimension::ALL[i])
}

fn bbox() -> impl Strategy<Value = Region> {
    (0.0f64..0.8, 0.0f64..0.8, 0.01f64..0.2, 0.01f64..0.2)
        .prop_map(|(x0, y0, w, h)| Region::Bbox { x0, y0, x1: x0 + w, y1: y0 + h })
}

fn issue() -> impl Strategy<Value = Issue> {
    (dimension(), 1u8..=3, proptest::option::of(bbox()), "[a-z ]{1,24}").prop_map(
        |(dimension, severity, region, directive)| {
            let target_text =
                (dimension == Dimension::Text).then(|| directive.to_uppercase());
            Issue { dimension, severity, region, directive, target_text }
        },
    )
}

fn critique() -> impl Strategy<Value = Critique> {
    proptest::collection::vec(issue(), 0..8).prop_map(|issues| Critique {
        satisfied: issues.is_empty(),
        issues,
        overall_comment: String::new(),
    })
}

fn dummy_image() -> ImageArtifact {
    ImageArtifact {
        id: "img".into(),
        png: Vec::new(),
        width: 64,
        height: 64,
        iteration: 0,
        seed: 0,
        parent: None,
    }
}

proptest! {
    /// Translation is deterministic, never exceeds the signal cap, and merges
    /// all prompt edits into at most one signal.
    #[test]
    fn translation_invariants(c in critique(), cap in 1usize..=9) {
        let mut cfg = RunConfig::default();
        cfg.max_signals_per_iteration = cap;
        let img = dummy_image();
        let signals = translate(&c, &img, &cfg);

        prop_assert_eq!(&signals, &translate(&c, &img, &cfg));
        prop_assert!(signals.len() <= cap);
        let edits = signals
            .iter()
            .filter(|s| matches!(s.payload, SignalPayload::PromptEdit { .. }))
            .count();
        prop_assert!(edits <= 1);

        // Every signal source traces back to a reported issue dimension.
        let issue_dims: Vec<Dimension> = c.issues.iter().map(|i| i.dimension).collect();
        for d in targeted_dimensions(&signals) {
            prop_assert!(issue_dims.contains(&d));
        }
        // A satisfied critique with no issues yields no signals.
        if c.issues.is_empty() {
            prop_assert!(signals.is_empty());
        }
    }

    /// Critiques survive a canonical JSON roundtrip unchanged.
    #[test]
    fn critique_json_roundtrip(c in critique()) {
        let json = canonical_json(&c);
        let back: Critique = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(canonical_json(&back), json);
    }

    /// Rasterized bbox masks cover every pixel whose center lies inside the
    /// box, never lose coverage to dilation, and only grow within the
    /// dilation margin.
    #[test]
    fn bbox_mask_coverage(r in bbox(), width in 1u32..=48, height in 1u32..=48) {
        let mask = rasterize_region(&r, width, height).unwrap();
        let (x0, y0, x1, y1) = match r {
            Region::Bbox { x0, y0, x1, y1 } => (x0, y0, x1, y1),
            _ => unreachable!(),
        };
        for y in 0..height {
            let cy = (y as f64 + 0.5) / height as f64;
            for x in 0..width {
                let cx = (x as f64 + 0.5) / width as f64;
                let inside = cx >= x0 && cx <= x1 && cy >= y0 && cy <= y1;
                if inside {
                    prop_assert_eq!(mask.get(x, y), 255);
                } else if mask.get(x, y) == 255 {
                    // Must be within the Euclidean dilation margin of some
                    // inside pixel center.
                    let near = (-2i64..=2).any(|dy| (-2i64..=2).any(|dx| {
                        if dx * dx + dy * dy > 4 {
                            return false;
                        }
                        let (qx, qy) = (x as i64 + dx, y as i64 + dy);
                        if qx < 0 || qy < 0 || qx >= width as i64 || qy >= height as i64 {
                            return false;
                        }
                        let qcx = (qx as f64 + 0.5) / width as f64;
                        let qcy = (qy as f64 + 0.5) / height as f64;
                        qcx >= x0 && qcx <= x1 && qcy >= y0 && qcy <= y1
                    }));
                    prop_assert!(near, "stray pixel at ({}, {})", x, y);
                }
            }
        }
    }

    /// Mask PNG encoding roundtrips exactly.
    #[test]
    fn mask_png_roundtrip(r in bbox(), width in 1u32..=32, height in 1u32..=32) {
        let mask = rasterize_region(&r, width, height).unwrap();
        let png = mask.to_png().unwrap();
        let back = lumigen::translator::MaskBitmap::from_png(&png).unwrap();
        prop_assert_eq!(mask.pixels, back.pixels);
    }
}
