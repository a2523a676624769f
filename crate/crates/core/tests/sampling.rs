use phenovit::dataset::{AnnotationMask, ImageTimeSeries, MaskSplit, PixelIndex, PixelSplit};
use phenovit::sampler::{extract, neighborhood, Arrangement, Boundary, Normalization, SamplerConfig, WindowSpec};
use phenovit::tokenizer::{detokenize, token_shape, tokenize, TokenMode};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Scene {
    w: usize,
    h: usize,
    frames: Vec<Vec<u8>>,
    labeled: Vec<bool>,
    target: (usize, usize),
}

fn scene() -> impl Strategy<Value = Scene> {
    (1usize..7, 1usize..7, 1usize..5).prop_flat_map(|(w, h, m)| {
        (
            prop::collection::vec(prop::collection::vec(any::<u8>(), w * h * 3), m),
            prop::collection::vec(any::<bool>(), w * h),
            0..w,
            0..h,
        )
            .prop_map(move |(frames, mut labeled, x, y)| {
                labeled[y * w + x] = true;
                Scene { w, h, frames, labeled, target: (x, y) }
            })
    })
}

fn config() -> impl Strategy<Value = SamplerConfig> {
    (
        prop_oneof![Just(Normalization::Raw), Just(Normalization::Chromaticity)],
        prop_oneof![Just(Arrangement::Rgbrgb), Just(Arrangement::Rrggbb)],
        prop_oneof![Just(Boundary::BlackPadding), Just(Boundary::RealValue)],
        prop_oneof![Just(WindowSpec::single()), Just(WindowSpec::cross()), (1usize..4).prop_map(|r| WindowSpec::square(2 * r + 1).unwrap())],
    )
        .prop_map(|(normalization, arrangement, boundary, window)| SamplerConfig { normalization, arrangement, boundary, window })
}

fn build(s: &Scene) -> (ImageTimeSeries, AnnotationMask, PixelIndex) {
    let m = s.frames.len();
    let series = ImageTimeSeries::new(s.w, s.h, (0..m).map(|t| format!("t{t}")).collect(), s.frames.clone()).unwrap();
    let labels = s.labeled.iter().map(|&l| l.then_some(0)).collect();
    let split = s.labeled.iter().map(|&l| if l { MaskSplit::Train } else { MaskSplit::None }).collect();
    let mask = AnnotationMask::new(s.w, s.h, labels, split, vec!["a".into()]).unwrap();
    let p = PixelIndex { x: s.target.0, y: s.target.1, label: 0, split: PixelSplit::Train };
    (series, mask, p)
}

proptest! {
    #[test]
    fn volume_follows_neighbourhood(s in scene(), cfg in config()) {
        let (series, mask, p) = build(&s);
        let sample = extract(&p, &series, &mask, &cfg).unwrap();
        let m = s.frames.len();
        let coords = neighborhood(p.x as i64, p.y as i64, cfg.window);
        prop_assert_eq!(sample.values.len(), coords.len() * 3 * m);
        for (pos, &(qx, qy)) in coords.iter().enumerate() {
            let inside = qx >= 0 && qy >= 0 && (qx as usize) < s.w && (qy as usize) < s.h;
            let kept = inside && (cfg.boundary == Boundary::RealValue || s.labeled[qy as usize * s.w + qx as usize]);
            for t in 0..m {
                let got = [sample.value(t, pos, 0), sample.value(t, pos, 1), sample.value(t, pos, 2)];
                if !kept {
                    prop_assert_eq!(got, [0.0; 3]);
                    continue;
                }
                let px = series.pixel(t, qx as usize, qy as usize);
                let raw = [px[0] as f64, px[1] as f64, px[2] as f64];
                match cfg.normalization {
                    Normalization::Raw => prop_assert_eq!(got, raw),
                    Normalization::Chromaticity => {
                        let sum: f64 = got.iter().sum();
                        let raw_sum: f64 = raw.iter().sum();
                        let ok = if raw_sum == 0.0 { sum == 0.0 } else { (sum - 1.0).abs() < 1e-12 };
                        prop_assert!(ok);
                        for ch in 0..3 {
                            prop_assert!((got[ch] * raw_sum - raw[ch]).abs() < 1e-9);
                        }
                    }
                }
            }
        }
        let centre = cfg.window.center();
        let px = series.pixel(0, p.x, p.y);
        if cfg.normalization == Normalization::Raw {
            prop_assert_eq!(sample.value(0, centre, 0), px[0] as f64);
        }
    }

    #[test]
    fn tokens_keep_every_value(s in scene(), cfg in config(), spatial in any::<bool>()) {
        let (series, mask, p) = build(&s);
        let sample = extract(&p, &series, &mask, &cfg).unwrap();
        let mode = if spatial { TokenMode::Spatial } else { TokenMode::Temporal };
        let seq = tokenize(&sample, mode);
        let m = s.frames.len();
        prop_assert_eq!((seq.n, seq.d_in), token_shape(m, cfg.window, mode));
        prop_assert_eq!(seq.n * seq.d_in, 3 * m * cfg.window.positions());

        let mut a = seq.data.clone();
        let mut b = sample.values.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
        prop_assert_eq!(detokenize(&seq, m, cfg.arrangement).unwrap(), sample.values);
    }
}

#[test]
fn unlabeled_target_is_rejected() {
    let s = Scene { w: 2, h: 1, frames: vec![vec![9; 6]], labeled: vec![true, false], target: (0, 0) };
    let (series, mask, _) = build(&s);
    let cfg = SamplerConfig {
        normalization: Normalization::Raw,
        arrangement: Arrangement::Rgbrgb,
        boundary: Boundary::RealValue,
        window: WindowSpec::single(),
    };
    let p = PixelIndex { x: 1, y: 0, label: 0, split: PixelSplit::Train };
    assert!(extract(&p, &series, &mask, &cfg).is_err());
    let p = PixelIndex { x: 5, y: 0, label: 0, split: PixelSplit::Train };
    assert!(extract(&p, &series, &mask, &cfg).is_err());
}
