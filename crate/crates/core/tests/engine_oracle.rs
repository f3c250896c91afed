mod common;

use common::*;
use ndarray::{s, Axis};
use neuronscope::engine::{
    compute_vo, forward, forward_with_intervention, generate_toy, msa_bias, random_images,
    Intervention, LnSite,
};
use neuronscope::ModelSpec;

#[test]
fn forward_matches_f64_reference() {
    let spec = ModelSpec::toy();
    let w = generate_toy(42, &spec);
    let imgs = random_images(42, &spec, 4);
    for img in imgs.outer_iter() {
        let ours = forward(&w, img).unwrap();
        let oracle = forward64(&w, &img.to_owned(), &[]);
        let d = max_abs_diff(
            &oracle.representation,
            ours.representation.iter().map(|&v| v as f64),
        );
        assert!(d < 1e-5, "representation diff {d}");
        for l in 0..spec.layers {
            for h in 0..spec.heads {
                let d = max_abs_diff(
                    &oracle.attn[l][h],
                    ours.attn_class_row
                        .slice(s![l, h, ..])
                        .iter()
                        .map(|&v| v as f64),
                );
                assert!(d < 1e-5);
            }
        }
        let d = max_abs_diff(
            &oracle.ln_sigma[LnSite::Post.index(&spec)],
            ours.ln_sigma
                .row(LnSite::Post.index(&spec))
                .iter()
                .map(|&v| v as f64),
        );
        assert!(d < 1e-5);
    }
}

#[test]
fn zeroing_last_layer_neuron_matches_manual_edit() {
    let spec = ModelSpec::toy();
    let w = generate_toy(42, &spec);
    let imgs = random_images(3, &spec, 1);
    let img = imgs.index_axis(Axis(0), 0);
    let last = spec.layers - 1;
    let patched = forward_with_intervention(
        &w,
        img,
        &[Intervention {
            layer: last,
            neuron: 17,
            replacement: vec![0.0; spec.tokens()],
        }],
    )
    .unwrap();
    let oracle = forward64(&w, &img.to_owned(), &[(last, 17, vec![0.0; spec.tokens()])]);
    let d = max_abs_diff(&oracle.representation, patched.iter().map(|&v| v as f64));
    assert!(d < 1e-5, "{d}");

    // manual residual edit: remove p·w from the final class stream and re-apply the final norm + projection
    let base = forward(&w, img).unwrap();
    let p0 = base.post_gelu[[last, 0, 17]];
    let edited = &base.class_token_prelnpost() - &(&w.layers[last].w_out.column(17) * p0);
    let (fin, _, _) = neuronscope::engine::layer_norm(
        edited.view().insert_axis(Axis(0)),
        w.ln_post_gamma.view(),
        w.ln_post_beta.view(),
        spec.ln_eps,
    );
    let manual = w.proj.dot(&fin.row(0));
    let d = (&manual - &patched)
        .mapv(f32::abs)
        .fold(0.0f32, |m, &v| m.max(v));
    assert!(d < 1e-6, "{d}");
}

#[test]
fn ov_matrix_reproduces_msa_class_output() {
    let spec = ModelSpec::toy();
    let w = generate_toy(42, &spec);
    let imgs = random_images(8, &spec, 2);
    for img in imgs.outer_iter() {
        let tr = forward(&w, img).unwrap();
        let oracle = forward64(&w, &img.to_owned(), &[]);
        for l in 0..spec.layers {
            let mut out: Vec<f64> = msa_bias(&w, l).iter().map(|&v| v as f64).collect();
            for h in 0..spec.heads {
                let vo = compute_vo(&w, l, h).unwrap();
                for i in 0..spec.tokens() {
                    let a = tr.attn_class_row[[l, h, i]] as f64;
                    for r in 0..spec.d_model {
                        let dot: f64 = (0..spec.d_model)
                            .map(|c| vo[[r, c]] as f64 * oracle.attn_in[l][i][c])
                            .sum();
                        out[r] += a * dot;
                    }
                }
            }
            let got: Vec<f64> = tr.msa_class_out.row(l).iter().map(|&v| v as f64).collect();
            let d = max_abs_diff(&out, got);
            assert!(d < 1e-5, "layer {l}: {d}");
        }
    }
}
