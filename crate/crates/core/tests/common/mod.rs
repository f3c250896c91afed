//! Test-only oracles. Everything here is written independently of the
//! library's fast paths: straight loops in `f64`, no shared helpers.

#![allow(dead_code)]

use neuronscope::engine::LnSite;
use neuronscope::weights::WeightBundle;
use neuronscope::ModelSpec;

pub type Mat = Vec<Vec<f64>>;

pub fn to64_2(a: &ndarray::Array2<f32>) -> Mat {
    a.rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

pub fn to64_1(a: &ndarray::Array1<f32>) -> Vec<f64> {
    a.iter().map(|&v| v as f64).collect()
}

pub fn matvec(m: &Mat, v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn erf(x: f64) -> f64 {
    // Abramowitz–Stegun 7.1.26 is too coarse; use a series/continued-fraction split.
    if x.abs() < 2.5 {
        let mut sum = x;
        let mut term = x;
        let x2 = x * x;
        for n in 1..200 {
            term *= -x2 / n as f64;
            let add = term / (2 * n + 1) as f64;
            sum += add;
            if add.abs() < 1e-17 {
                break;
            }
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    } else {
        // erfc continued fraction (Lentz)
        let z = x.abs();
        let mut f = z;
        let mut c = z;
        let mut d = 0.0;
        for k in 1..300 {
            let a = k as f64 / 2.0;
            d = z + a * d;
            d = 1.0 / d;
            c = z + a / c;
            let delta = c * d;
            f *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        let erfc = (-z * z).exp() / (f * std::f64::consts::PI.sqrt());
        (1.0 - erfc) * x.signum()
    }
}

pub fn gelu64(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn ln64(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> (Vec<f64>, f64, f64) {
    let d = x.len() as f64;
    let mu = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    let sd = (var + eps).sqrt();
    (
        x.iter()
            .zip(g)
            .zip(b)
            .map(|((v, g), b)| g * (v - mu) / sd + b)
            .collect(),
        mu,
        sd,
    )
}

pub struct OracleTrace {
    /// [layer][token][neuron]
    pub post_gelu: Vec<Vec<Vec<f64>>>,
    /// [layer][head][token]
    pub attn: Vec<Vec<Vec<f64>>>,
    /// [ln site][token]
    pub ln_mu: Vec<Vec<f64>>,
    pub ln_sigma: Vec<Vec<f64>>,
    pub representation: Vec<f64>,
    /// class-token MSA output per layer
    pub msa_class_out: Vec<Vec<f64>>,
    /// normalized MSA inputs per layer: [layer][token][channel]
    pub attn_in: Vec<Mat>,
}

/// Straight-line `f64` forward pass. `patch` optionally overrides post-GELU
/// activations: (layer, neuron, per-token values).
pub fn forward64(
    w: &WeightBundle,
    image: &ndarray::Array3<f32>,
    patch: &[(usize, usize, Vec<f64>)],
) -> OracleTrace {
    let s = &w.spec;
    let (g, p, d) = (s.grid(), s.patch_size, s.d_model);
    let t = s.tokens();
    let eps = s.ln_eps as f64;
    let mut z: Mat = vec![vec![0.0; d]; t];
    for j in 0..d {
        z[0][j] = w.class_embed[j] as f64;
    }
    for r in 0..g {
        for c in 0..g {
            let tok = 1 + r * g + c;
            for o in 0..d {
                let mut acc = 0.0;
                for ch in 0..3 {
                    for y in 0..p {
                        for x in 0..p {
                            acc += w.patch_embed[[o, ch, y, x]] as f64
                                * image[[ch, r * p + y, c * p + x]] as f64;
                        }
                    }
                }
                z[tok][o] = acc;
            }
        }
    }
    for i in 0..t {
        for j in 0..d {
            z[i][j] += w.pos_embed[[i, j]] as f64;
        }
    }
    let nln = s.ln_count();
    let mut ln_mu = vec![vec![0.0; t]; nln];
    let mut ln_sigma = vec![vec![0.0; t]; nln];
    let apply_ln = |z: &Mat,
                    gm: &ndarray::Array1<f32>,
                    bt: &ndarray::Array1<f32>,
                    site: usize,
                    mu: &mut Vec<Vec<f64>>,
                    sg: &mut Vec<Vec<f64>>|
     -> Mat {
        let g = to64_1(gm);
        let b = to64_1(bt);
        z.iter()
            .enumerate()
            .map(|(i, row)| {
                let (o, m, sd) = ln64(row, &g, &b, eps);
                mu[site][i] = m;
                sg[site][i] = sd;
                o
            })
            .collect()
    };
    z = apply_ln(
        &z,
        &w.ln_pre_gamma,
        &w.ln_pre_beta,
        LnSite::Pre.index(s),
        &mut ln_mu,
        &mut ln_sigma,
    );

    let dh = s.head_dim();
    let mut post_gelu = Vec::new();
    let mut attn_all = Vec::new();
    let mut msa_class_out = Vec::new();
    let mut attn_in = Vec::new();
    for (l, lw) in w.layers.iter().enumerate() {
        let x = apply_ln(
            &z,
            &lw.ln1_gamma,
            &lw.ln1_beta,
            LnSite::Attn(l).index(s),
            &mut ln_mu,
            &mut ln_sigma,
        );
        let (wq, wk, wv, wo) = (
            to64_2(&lw.w_q),
            to64_2(&lw.w_k),
            to64_2(&lw.w_v),
            to64_2(&lw.w_o),
        );
        let (bq, bk, bv, bo) = (
            to64_1(&lw.b_q),
            to64_1(&lw.b_k),
            to64_1(&lw.b_v),
            to64_1(&lw.b_o),
        );
        attn_in.push(x.clone());
        let lin = |m: &Mat, b: &[f64], v: &[f64]| -> Vec<f64> {
            matvec(m, v).iter().zip(b).map(|(a, b)| a + b).collect()
        };
        let q: Mat = x.iter().map(|r| lin(&wq, &bq, r)).collect();
        let k: Mat = x.iter().map(|r| lin(&wk, &bk, r)).collect();
        let v: Mat = x.iter().map(|r| lin(&wv, &bv, r)).collect();
        let mut concat = vec![vec![0.0; d]; t];
        let mut attn_l = vec![vec![0.0; t]; s.heads];
        for h in 0..s.heads {
            for i in 0..t {
                let mut sc: Vec<f64> = (0..t)
                    .map(|j| {
                        (0..dh)
                            .map(|e| q[i][h * dh + e] * k[j][h * dh + e])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                sc.iter_mut().for_each(|v| *v = (*v - mx).exp());
                let sum: f64 = sc.iter().sum();
                sc.iter_mut().for_each(|v| *v /= sum);
                if i == 0 {
                    attn_l[h] = sc.clone();
                }
                for e in 0..dh {
                    concat[i][h * dh + e] = (0..t).map(|j| sc[j] * v[j][h * dh + e]).sum();
                }
            }
        }
        let msa: Mat = concat.iter().map(|r| lin(&wo, &bo, r)).collect();
        msa_class_out.push(msa[0].clone());
        for i in 0..t {
            for j in 0..d {
                z[i][j] += msa[i][j];
            }
        }
        attn_all.push(attn_l);

        let x = apply_ln(
            &z,
            &lw.ln2_gamma,
            &lw.ln2_beta,
            LnSite::Mlp(l).index(s),
            &mut ln_mu,
            &mut ln_sigma,
        );
        let (win, bin, wout, bout) = (
            to64_2(&lw.w_in),
            to64_1(&lw.b_in),
            to64_2(&lw.w_out),
            to64_1(&lw.b_out),
        );
        let mut hidden: Mat = x
            .iter()
            .map(|r| lin(&win, &bin, r).into_iter().map(gelu64).collect())
            .collect();
        for (pl, pn, vals) in patch {
            if *pl == l {
                for i in 0..t {
                    hidden[i][*pn] = vals[i];
                }
            }
        }
        for i in 0..t {
            let out = lin(&wout, &bout, &hidden[i]);
            for j in 0..d {
                z[i][j] += out[j];
            }
        }
        post_gelu.push(hidden);
    }
    let fin = apply_ln(
        &z,
        &w.ln_post_gamma,
        &w.ln_post_beta,
        LnSite::Post.index(s),
        &mut ln_mu,
        &mut ln_sigma,
    );
    let representation = matvec(&to64_2(&w.proj), &fin[0]);
    OracleTrace {
        post_gelu,
        attn: attn_all,
        ln_mu,
        ln_sigma,
        representation,
        msa_class_out,
        attn_in,
    }
}

/// `W_O[:, h] W_V[h, :]` in f64.
pub fn vo64(w: &WeightBundle, layer: usize, head: usize) -> Mat {
    let s = &w.spec;
    let dh = s.head_dim();
    let lw = &w.layers[layer];
    let d = s.d_model;
    (0..d)
        .map(|r| {
            (0..d)
                .map(|c| {
                    (0..dh)
                        .map(|e| {
                            lw.w_o[[r, head * dh + e]] as f64 * lw.w_v[[head * dh + e, c]] as f64
                        })
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// Literal triple-loop second-order effect over (l', h, i), reading the
/// recorded trace of image `img`.
pub fn second_order_loop(
    w: &WeightBundle,
    trace: &neuronscope::engine::ActivationTrace,
    img: usize,
    layer: usize,
    neuron: usize,
    bias_shares: bool,
) -> Vec<f64> {
    let s: &ModelSpec = &w.spec;
    let d = s.d_model;
    let post = LnSite::Post.index(s);
    let (fmu, fsd) = (
        trace.ln_mu[[img, post, 0]] as f64,
        trace.ln_sigma[[img, post, 0]] as f64,
    );
    let a_fin: Vec<f64> = (0..d).map(|j| w.ln_post_gamma[j] as f64 / fsd).collect();
    let b_fin: Vec<f64> = (0..d)
        .map(|j| w.ln_post_beta[j] as f64 - fmu * w.ln_post_gamma[j] as f64 / fsd)
        .collect();
    let wcol: Vec<f64> = (0..d)
        .map(|j| w.layers[layer].w_out[[j, neuron]] as f64)
        .collect();
    let proj = to64_2(&w.proj);
    let c = (s.layers * s.mlp_width) as f64;
    let mut phi = vec![0.0; s.d_out];
    for later in layer + 1..s.layers {
        let lw = &w.layers[later];
        let site = LnSite::Attn(later).index(s);
        let c_later = (later * s.mlp_width) as f64;
        for h in 0..s.heads {
            let vo = vo64(w, later, h);
            for i in 0..s.tokens() {
                let p = trace.post_gelu[[img, layer, i, neuron]] as f64;
                let a = trace.attn_class_row[[img, later, h, i]] as f64;
                let (mu, sd) = (
                    trace.ln_mu[[img, site, i]] as f64,
                    trace.ln_sigma[[img, site, i]] as f64,
                );
                let inner: Vec<f64> = (0..d)
                    .map(|j| {
                        let g = lw.ln1_gamma[j] as f64;
                        let mut v = g / sd * wcol[j];
                        if bias_shares {
                            v += (lw.ln1_beta[j] as f64 - mu * g / sd) / c_later;
                        }
                        v
                    })
                    .collect();
                let mid = matvec(&vo, &inner);
                let pre: Vec<f64> = (0..d)
                    .map(|j| a_fin[j] * mid[j] + if bias_shares { b_fin[j] / c } else { 0.0 })
                    .collect();
                let out = matvec(&proj, &pre);
                for (o, v) in phi.iter_mut().zip(out) {
                    *o += p * a * v;
                }
            }
        }
    }
    phi
}

pub fn max_abs_diff(a: &[f64], b: impl IntoIterator<Item = f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
