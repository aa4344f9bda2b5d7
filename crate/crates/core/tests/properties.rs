use mdc_core::linalg::Matrix;
use mdc_core::objective::{chimera_loss, MaskTerm};
use mdc_core::signal::{istft, stft};
use mdc_core::{
    affinity_loss_expanded, affinity_loss_pairwise, kmeans, si_sdr, simplex_vertices, EmbeddingMatrix,
    KMeansConfig, StftConfig, TargetMatrix, TargetMode,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

fn embeddings_and_labels() -> impl Strategy<Value = (Matrix, Vec<usize>, usize)> {
    (2usize..60, 2usize..8, 2usize..5).prop_flat_map(|(rows, dim, n)| {
        (
            matrix(rows, dim).prop_filter("rows away from zero", |m| {
                m.iter_rows().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3)
            }),
            prop::collection::vec(0..n, rows),
            Just(n),
        )
    })
}

fn mode() -> impl Strategy<Value = TargetMode> {
    prop_oneof![Just(TargetMode::OneHot), Just(TargetMode::Simplex)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_invariant_to_rotating_embeddings(
        (v, labels, n) in embeddings_and_labels(),
        seed in prop::collection::vec(-1.0f64..1.0, 64),
        mode in mode(),
    ) {
        let d = v.cols();
        let q = DMatrix::from_iterator(d, d, seed.iter().cycle().take(d * d).copied())
            + DMatrix::identity(d, d) * 2.0;
        let q = q.qr().q();
        let vd = DMatrix::from_row_slice(v.rows(), d, v.as_slice());
        let rotated = &vd * &q;
        let rotated_rows: Vec<f64> = rotated.transpose().iter().copied().collect();
        let v = EmbeddingMatrix::normalize(v).unwrap();
        let r = EmbeddingMatrix::normalize(Matrix::from_vec(vd.nrows(), d, rotated_rows).unwrap()).unwrap();
        let y = TargetMatrix::from_labels(&labels, n, mode).unwrap();
        let a = affinity_loss_pairwise(&v, &y).unwrap().value;
        let b = affinity_loss_pairwise(&r, &y).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn expanded_and_pairwise_forms_agree((v, labels, n) in embeddings_and_labels(), mode in mode()) {
        let v = EmbeddingMatrix::normalize(v).unwrap();
        let y = TargetMatrix::from_labels(&labels, n, mode).unwrap();
        let a = affinity_loss_expanded(&v, &y).unwrap().value;
        let b = affinity_loss_pairwise(&v, &y).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-10 * b.max(1.0));
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn chimera_loss_is_affine_in_alpha(
        (v, labels, n) in embeddings_and_labels(),
        raw_masks in prop::collection::vec(0.0f64..1.0, 4 * 60),
        mags in prop::collection::vec(0.0f64..2.0, 5 * 60),
        alpha in 0.0f64..=1.0,
    ) {
        let rows = v.rows();
        // lay the TF grid out as rows × 1
        let masks: Vec<Matrix> = (0..n)
            .map(|k| Matrix::from_vec(rows, 1, raw_masks[k * rows..(k + 1) * rows].to_vec()).unwrap())
            .collect();
        let mix = Matrix::from_vec(rows, 1, mags[..rows].to_vec()).unwrap();
        let srcs: Vec<Matrix> = (0..n)
            .map(|k| Matrix::from_vec(rows, 1, mags[(k + 1) * rows..(k + 2) * rows].to_vec()).unwrap())
            .collect();
        let v = EmbeddingMatrix::normalize(v).unwrap();
        let y = TargetMatrix::from_labels(&labels, n, TargetMode::Simplex).unwrap();
        let term = MaskTerm { masks: &masks, mix_mag: &mix, src_mags: &srcs };
        let at = |a| chimera_loss(&v, &y, term, a).unwrap().value;
        let (dc, mi, mid) = (at(1.0), at(0.0), at(alpha));
        let expected = alpha * dc + (1.0 - alpha) * mi;
        prop_assert!((mid - expected).abs() <= 1e-12 * expected.abs().max(1.0), "{mid} vs {expected}");
    }

    #[test]
    fn si_sdr_ignores_estimate_gain(
        reference in prop::collection::vec(-1.0f64..1.0, 64..256),
        noise in prop::collection::vec(-0.3f64..0.3, 256),
        gain in prop_oneof![1e-3f64..1e-1, 1e-1f64..10.0, 10.0f64..1e3],
    ) {
        prop_assume!(reference.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        let est: Vec<f64> = reference.iter().zip(&noise).map(|(r, n)| r + n).collect();
        let scaled: Vec<f64> = est.iter().map(|x| gain * x).collect();
        let a = si_sdr(&est, &reference).unwrap();
        let b = si_sdr(&scaled, &reference).unwrap();
        prop_assert!(a.is_infinite() == b.is_infinite());
        if !a.is_infinite() {
            prop_assert!((a.value() - b.value()).abs() < 1e-9);
        }
    }

    #[test]
    fn stft_is_linear_and_invertible(
        x in prop::collection::vec(-1.0f64..1.0, 1024),
        z in prop::collection::vec(-1.0f64..1.0, 1024),
        c in -3.0f64..3.0,
    ) {
        let cfg = StftConfig::default();
        let sum: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a + c * b).collect();
        let (sx, sz, ss) = (stft(&x, &cfg).unwrap(), stft(&z, &cfg).unwrap(), stft(&sum, &cfg).unwrap());
        let worst = sx.as_slice().iter().zip(sz.as_slice()).zip(ss.as_slice())
            .map(|((a, b), s)| (a + b * c - s).norm())
            .fold(0.0, f64::max);
        prop_assert!(worst < 1e-9);
        let back = istft(&sx, &cfg).unwrap();
        let interior = cfg.win_len..x.len() - cfg.win_len;
        prop_assert!(interior.clone().all(|i| (back[i] - x[i]).abs() < 1e-9));
    }

    #[test]
    fn kmeans_inertia_never_increases(seed in 0u64..1000, n in 2usize..4) {
        let sv = simplex_vertices(n).unwrap();
        let rows: Vec<Vec<f64>> = (0..90)
            .map(|i| {
                let jitter = ((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0 - 0.5;
                sv.vertex(i % n).iter().map(|x| x + 0.6 * jitter).collect()
            })
            .collect();
        let points = Matrix::from_rows(&rows).unwrap();
        let result = kmeans(&points, &KMeansConfig { seed, ..KMeansConfig::new(n) }).unwrap();
        prop_assert!(result.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        let best = result.restart_inertias.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(result.inertia, best);
        prop_assert!(result.labels.iter().all(|&l| l < n));
    }
}
