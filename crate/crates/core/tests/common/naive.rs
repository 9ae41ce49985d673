//! Straight-line reference implementations on plain row vectors. Nothing here
//! goes through the tape; every loop is written out explicitly.

use tvpr_core::tensor::{ParamStore, GELU_CUBIC, GELU_SQRT_2_OVER_PI};

pub type Rows = Vec<Vec<f64>>;

pub fn param(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.value(id).data().to_vec()
}

pub fn linear(x: &Rows, w: &[f64], b: &[f64]) -> Rows {
    let out = b.len();
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn store_linear(store: &ParamStore<f64>, name: &str, x: &Rows) -> Rows {
    linear(x, &param(store, &format!("{name}.weight")), &param(store, &format!("{name}.bias")))
}

pub fn layer_norm(x: &Rows, gain: &[f64], bias: &[f64], eps: f64) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

pub fn store_layer_norm(store: &ParamStore<f64>, name: &str, x: &Rows) -> Rows {
    layer_norm(x, &param(store, &format!("{name}.gain")), &param(store, &format!("{name}.bias")), 1e-6)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x.powi(3))).tanh())
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Multi-head attention of `queries` over `context`, one head at a time.
pub fn attention(store: &ParamStore<f64>, name: &str, heads: usize, queries: &Rows, context: &Rows) -> Rows {
    let q = store_linear(store, &format!("{name}.query"), queries);
    let k = store_linear(store, &format!("{name}.key"), context);
    let v = store_linear(store, &format!("{name}.value"), context);
    let d = q[0].len();
    let dh = d / heads;
    let mut concat = vec![vec![0.0; d]; queries.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (qi, qrow) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|krow| cols.clone().map(|c| qrow[c] * krow[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = softmax(&scores);
            for c in cols.clone() {
                concat[qi][c] = w.iter().zip(&v).map(|(wj, vrow)| wj * vrow[c]).sum();
            }
        }
    }
    store_linear(store, &format!("{name}.output"), &concat)
}

pub fn mlp(store: &ParamStore<f64>, name: &str, x: &Rows) -> Rows {
    let h = store_linear(store, &format!("{name}.fc1"), x);
    let h: Rows = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    store_linear(store, &format!("{name}.fc2"), &h)
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Pre-norm encoder layer; only rows in `keys` act as attention keys.
pub fn encoder_layer(store: &ParamStore<f64>, name: &str, heads: usize, x: &Rows, keys: Option<&[usize]>) -> Rows {
    let n1 = store_layer_norm(store, &format!("{name}.norm1"), x);
    let ctx: Rows = match keys {
        Some(k) => k.iter().map(|&i| n1[i].clone()).collect(),
        None => n1.clone(),
    };
    let a = attention(store, &format!("{name}.attention"), heads, &n1, &ctx);
    let x1 = add(x, &a);
    let n2 = store_layer_norm(store, &format!("{name}.norm2"), &x1);
    add(&x1, &mlp(store, &format!("{name}.mlp"), &n2))
}

/// Divided space-time block: sequence row 0 is CLS, then frame-major patches.
pub fn space_time_block(store: &ParamStore<f64>, name: &str, heads: usize, frames: usize, patches: usize, x: &Rows) -> Rows {
    let d = x[0].len();
    let at = |t: usize, p: usize| 1 + t * patches + p;

    let nt = store_layer_norm(store, &format!("{name}.temporal_norm"), x);
    let mut xt = x.clone();
    for p in 0..patches {
        let group: Rows = (0..frames).map(|t| nt[at(t, p)].clone()).collect();
        let out = attention(store, &format!("{name}.temporal_attention"), heads, &group, &group);
        for t in 0..frames {
            for c in 0..d {
                xt[at(t, p)][c] += out[t][c];
            }
        }
    }

    let ns = store_layer_norm(store, &format!("{name}.spatial_norm"), &xt);
    let mut s = vec![vec![0.0; d]; x.len()];
    let mut cls_frame_sum = vec![0.0; d];
    for t in 0..frames {
        let mut group = vec![ns[0].clone()];
        group.extend((0..patches).map(|p| ns[at(t, p)].clone()));
        let out = attention(store, &format!("{name}.spatial_attention"), heads, &group, &group);
        for c in 0..d {
            cls_frame_sum[c] += out[0][c];
        }
        for p in 0..patches {
            s[at(t, p)] = out[1 + p].clone();
        }
    }
    let global = attention(store, &format!("{name}.spatial_attention"), heads, &vec![ns[0].clone()], &ns);
    for c in 0..d {
        s[0][c] = 0.5 * (cls_frame_sum[c] / frames as f64 + global[0][c]);
    }
    let x1 = add(x, &s);
    let nm = store_layer_norm(store, &format!("{name}.mlp_norm"), &x1);
    add(&x1, &mlp(store, &format!("{name}.mlp"), &nm))
}

/// Direct 3-D convolution `[T, Cin, H, W]` with kernel `[Cout, Cin, kt, kh, kw]`,
/// zero padding `(pt, ps)` and strides `(st, ss)`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d(
    x: &[f64],
    (t, cin, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (cout, kt, kh, kw): (usize, usize, usize, usize),
    (st, ss): (usize, usize),
    (pt, ps): (usize, usize),
) -> (Vec<f64>, (usize, usize, usize, usize)) {
    let to = (t + 2 * pt - kt) / st + 1;
    let ho = (h + 2 * ps - kh) / ss + 1;
    let wo = (w + 2 * ps - kw) / ss + 1;
    let mut out = vec![0.0; to * cout * ho * wo];
    for o_t in 0..to {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for dt in 0..kt {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let it = (o_t * st + dt) as isize - pt as isize;
                                    let iy = (oy * ss + dy) as isize - ps as isize;
                                    let ix = (ox * ss + dx) as isize - ps as isize;
                                    if it < 0 || iy < 0 || ix < 0 || it as usize >= t || iy as usize >= h || ix as usize >= w {
                                        continue;
                                    }
                                    let xv = x[((it as usize * cin + ci) * h + iy as usize) * w + ix as usize];
                                    let kv = k[(((co * cin + ci) * kt + dt) * kh + dy) * kw + dx];
                                    acc += xv * kv;
                                }
                            }
                        }
                    }
                    out[((o_t * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, (to, cout, ho, wo))
}

pub fn flatten(x: &Rows) -> Vec<f64> {
    x.iter().flatten().copied().collect()
}

pub fn rows_of(data: &[f64], cols: usize) -> Rows {
    data.chunks(cols).map(<[f64]>::to_vec).collect()
}
