//! Forward and backward kernels on CHW tensors.
//!
//! Strided convolutions read from a phase-decimated copy of their input,
//! `phases[p][c][r][m] = input[c][r][m·sw + p]`, so every inner loop walks
//! contiguous memory. Each conv output is accumulated as bias, then taps in
//! `(c, ki, kj)` order, which is exactly the naive nested-loop order.

const BLOCK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub oh: usize,
    pub ow: usize,
    /// Width of one decimated phase, `ceil(w / sw)`.
    pub wp: usize,
}

impl ConvGeom {
    /// `None` when the kernel does not fit the input.
    pub fn new(
        (c, h, w): (usize, usize, usize),
        o: usize,
        (kh, kw): (usize, usize),
        (sh, sw): (usize, usize),
    ) -> Option<Self> {
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 || kh > h || kw > w {
            return None;
        }
        Some(ConvGeom {
            c,
            h,
            w,
            o,
            kh,
            kw,
            sh,
            sw,
            oh: (h - kh) / sh + 1,
            ow: (w - kw) / sw + 1,
            wp: w.div_ceil(sw),
        })
    }

    pub fn taps(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn phased_len(&self) -> usize {
        self.sw * self.c * self.h * self.wp
    }

    /// Index in the phased source of input element `(c, r, m·sw + p)`.
    #[inline]
    fn src(&self, p: usize, c: usize, r: usize, m: usize) -> usize {
        ((p * self.c + c) * self.h + r) * self.wp + m
    }

    /// Phased-source offset of every tap `(c, ki, kj)` for output `(0, 0)`;
    /// output `(i, j)` adds `i·sh·wp + j`.
    fn tap_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.taps());
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    out.push(self.src(kj % self.sw, c, ki, kj / self.sw));
                }
            }
        }
        out
    }

    #[inline]
    fn row_step(&self) -> usize {
        self.sh * self.wp
    }
}

/// Fills `out` with the phase-decimated copy of `input`; a no-op view is
/// used instead when `sw == 1`.
pub(crate) fn decimate(input: &[f64], g: &ConvGeom, out: &mut Vec<f64>) {
    out.clear();
    out.resize(g.phased_len(), 0.0);
    if g.sw == 2 {
        let (even, odd) = out.split_at_mut(g.c * g.h * g.wp);
        for ((row, e), o) in input.chunks_exact(g.w).zip(even.chunks_exact_mut(g.wp)).zip(odd.chunks_exact_mut(g.wp)) {
            let pairs = row.chunks_exact(2);
            if let [last] = pairs.remainder() {
                e[g.wp - 1] = *last;
            }
            for ((pe, po), p) in e.iter_mut().zip(o.iter_mut()).zip(pairs) {
                *pe = p[0];
                *po = p[1];
            }
        }
        return;
    }
    for p in 0..g.sw {
        for c in 0..g.c {
            for r in 0..g.h {
                let row = &input[(c * g.h + r) * g.w..][..g.w];
                let dst = &mut out[g.src(p, c, r, 0)..][..g.wp];
                for (d, &v) in dst.iter_mut().zip(row.iter().skip(p).step_by(g.sw)) {
                    *d = v;
                }
            }
        }
    }
}

/// Inverse of `decimate` for gradients.
pub(crate) fn interleave(phased: &[f64], g: &ConvGeom, out: &mut [f64]) {
    if g.sw == 2 {
        let (even, odd) = phased.split_at(g.c * g.h * g.wp);
        for ((row, e), o) in out.chunks_exact_mut(g.w).zip(even.chunks_exact(g.wp)).zip(odd.chunks_exact(g.wp)) {
            let mut pairs = row.chunks_exact_mut(2);
            for ((p, &ve), &vo) in (&mut pairs).zip(e).zip(o) {
                p[0] = ve;
                p[1] = vo;
            }
            if let [last] = pairs.into_remainder() {
                *last = e[g.wp - 1];
            }
        }
        return;
    }
    for p in 0..g.sw {
        for c in 0..g.c {
            for r in 0..g.h {
                let row = &mut out[(c * g.h + r) * g.w..][..g.w];
                let src = &phased[g.src(p, c, r, 0)..][..g.wp];
                for (d, &v) in row.iter_mut().skip(p).step_by(g.sw).zip(src) {
                    *d = v;
                }
            }
        }
    }
}

/// Output channels computed together by the conv forward kernel.
const OB: usize = 8;
/// Output positions per conv forward register block.
const FB: usize = 12;
/// Taps computed together by the conv backward kernels.
const TB: usize = 4;
/// Output positions per conv input-gradient register block.
const IB: usize = 24;
const LANES: usize = 8;

/// Weights regrouped as `[block][tap][OB]`; the last block repeats the
/// final channel so every block is full.
fn pack_by_output(weights: &[f64], o: usize, taps: usize) -> Vec<f64> {
    let blocks = o.div_ceil(OB);
    let mut packed = Vec::with_capacity(blocks * taps * OB);
    for b in 0..blocks {
        for t in 0..taps {
            packed.extend((0..OB).map(|q| weights[(b * OB + q).min(o - 1) * taps + t]));
        }
    }
    packed
}

pub(crate) fn conv_forward(src: &[f64], g: &ConvGeom, weights: &[f64], bias: &[f64], out: &mut [f64]) {
    let taps = g.taps();
    let offsets = g.tap_offsets();
    let packed = pack_by_output(weights, g.o, taps);
    for (b, pw) in packed.chunks_exact(taps * OB).enumerate() {
        let first = b * OB;
        let live = OB.min(g.o - first);
        let b0: [f64; OB] = std::array::from_fn(|q| bias[(first + q).min(g.o - 1)]);
        for i in 0..g.oh {
            let row_base = i * g.row_step();
            let mut jb = 0;
            while jb + FB <= g.ow {
                let mut acc: [[f64; FB]; OB] = std::array::from_fn(|q| [b0[q]; FB]);
                for (wq, &off) in pw.chunks_exact(OB).zip(&offsets) {
                    let base = off + row_base + jb;
                    let s: &[f64; FB] = src[base..base + FB].try_into().unwrap();
                    for q in 0..OB {
                        let w = wq[q];
                        for k in 0..FB {
                            acc[q][k] = madd(w, s[k], acc[q][k]);
                        }
                    }
                }
                for (q, a) in acc.iter().enumerate().take(live) {
                    out[((first + q) * g.oh + i) * g.ow + jb..][..FB].copy_from_slice(a);
                }
                jb += FB;
            }
            for j in jb..g.ow {
                for q in 0..live {
                    let mut s = b0[q];
                    for (wq, &off) in pw.chunks_exact(OB).zip(&offsets) {
                        s = madd(wq[q], src[off + row_base + j], s);
                    }
                    out[((first + q) * g.oh + i) * g.ow + j] = s;
                }
            }
        }
    }
}

/// Output channels per conv weight-gradient block.
const PB: usize = 4;
/// Lanes per weight-gradient accumulator.
const PL: usize = 4;
/// Output positions per weight-gradient cache tile.
const PT: usize = 256;

/// Writes (not accumulates) weight and bias gradients. Each weight
/// gradient is a dot product of a `dout` row with a shifted `src` row,
/// accumulated in `PL` lanes over output positions in order.
pub(crate) fn conv_backward_params(src: &[f64], g: &ConvGeom, dout: &[f64], dweights: &mut [f64], dbias: &mut [f64]) {
    let taps = g.taps();
    let offsets = g.tap_offsets();
    let plane = g.oh * g.ow;
    for (o, db) in dbias.iter_mut().enumerate() {
        *db = sum(&dout[o * plane..][..plane]);
    }
    let (nob, ntb) = (g.o.div_ceil(PB), taps.div_ceil(TB));
    let oc = |b: usize, q: usize| (b * PB + q).min(g.o - 1);
    let tc = |t: usize, r: usize| offsets[(t * TB + r).min(taps - 1)];
    let mut part = vec![[[[0.0f64; PL]; TB]; PB]; nob * ntb];
    let mut tail = vec![[[0.0f64; TB]; PB]; nob * ntb];
    let full = g.ow / PL * PL;
    for i in 0..g.oh {
        let rb = i * g.row_step();
        let drow = |o: usize| &dout[(o * g.oh + i) * g.ow..][..g.ow];
        for j0 in (0..full).step_by(PT) {
            let j1 = (j0 + PT).min(full);
            for b in 0..nob {
                let d: [&[f64]; PB] = std::array::from_fn(|q| &drow(oc(b, q))[j0..j1]);
                for t in 0..ntb {
                    let s: [&[f64]; TB] = std::array::from_fn(|r| &src[tc(t, r) + rb..][j0..j1]);
                    let mut acc = part[b * ntb + t];
                    for j in (0..j1 - j0).step_by(PL) {
                        let dv: [&[f64; PL]; PB] = std::array::from_fn(|q| d[q][j..j + PL].try_into().unwrap());
                        let sv: [&[f64; PL]; TB] = std::array::from_fn(|r| s[r][j..j + PL].try_into().unwrap());
                        for q in 0..PB {
                            for r in 0..TB {
                                for k in 0..PL {
                                    acc[q][r][k] = madd(dv[q][k], sv[r][k], acc[q][r][k]);
                                }
                            }
                        }
                    }
                    part[b * ntb + t] = acc;
                }
            }
        }
        for j in full..g.ow {
            for b in 0..nob {
                for t in 0..ntb {
                    let tl = &mut tail[b * ntb + t];
                    for (q, tq) in tl.iter_mut().enumerate() {
                        let d = drow(oc(b, q))[j];
                        for (r, a) in tq.iter_mut().enumerate() {
                            *a = madd(d, src[tc(t, r) + rb + j], *a);
                        }
                    }
                }
            }
        }
    }
    for (o, row) in dweights.chunks_exact_mut(taps).enumerate() {
        for (t, dw) in row.iter_mut().enumerate() {
            let k = o / PB * ntb + t / TB;
            let a = &part[k][o % PB][t % TB];
            *dw = (a[0] + a[2]) + (a[1] + a[3]) + tail[k][o % PB][t % TB];
        }
    }
}

/// Gradient with respect to the phased source; `interleave` maps it back
/// when `sw > 1`.
pub(crate) fn conv_backward_input(g: &ConvGeom, weights: &[f64], dout: &[f64], dsrc: &mut [f64]) {
    dsrc.fill(0.0);
    let taps = g.taps();
    let offsets = g.tap_offsets();
    for tb in (0..taps).step_by(TB) {
        let live = TB.min(taps - tb);
        let tc: [usize; TB] = std::array::from_fn(|r| (tb + r).min(taps - 1));
        // wt[o][r] = weights[o][tc[r]]
        let wt: Vec<[f64; TB]> = (0..g.o)
            .map(|o| std::array::from_fn(|r| weights[o * taps + tc[r]]))
            .collect();
        for i in 0..g.oh {
            let row_base = i * g.row_step();
            let mut jb = 0;
            while jb + IB <= g.ow {
                let mut acc = [[0.0f64; IB]; TB];
                for (o, w) in wt.iter().enumerate() {
                    let d: &[f64; IB] = dout[(o * g.oh + i) * g.ow + jb..][..IB].try_into().unwrap();
                    for r in 0..TB {
                        for k in 0..IB {
                            acc[r][k] = madd(w[r], d[k], acc[r][k]);
                        }
                    }
                }
                for (r, a) in acc.iter().enumerate().take(live) {
                    let base = offsets[tb + r] + row_base + jb;
                    for (x, &v) in dsrc[base..base + IB].iter_mut().zip(a) {
                        *x += v;
                    }
                }
                jb += IB;
            }
            for j in jb..g.ow {
                for r in 0..live {
                    let mut s = 0.0;
                    for (o, w) in wt.iter().enumerate() {
                        s = madd(w[r], dout[(o * g.oh + i) * g.ow + j], s);
                    }
                    dsrc[offsets[tb + r] + row_base + j] += s;
                }
            }
        }
    }
}

/// Non-overlapping max pool; a trailing remainder is dropped and the first
/// maximum wins ties. `argmax` receives flat input indices.
pub(crate) fn maxpool_forward(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    (ph, pw): (usize, usize),
    out: &mut [f64],
    argmax: &mut Vec<u32>,
) {
    let (oh, ow) = (h / ph, w / pw);
    argmax.clear();
    argmax.resize(c * oh * ow, 0);
    if ph == 1 && pw == 2 {
        for r in 0..c * h {
            let row = &input[r * w..][..2 * ow];
            let base = r * w;
            for (j, pair) in row.chunks_exact(2).enumerate() {
                let k = r * ow + j;
                let second = pair[1] > pair[0];
                out[k] = if second { pair[1] } else { pair[0] };
                argmax[k] = (base + 2 * j + usize::from(second)) as u32;
            }
        }
        return;
    }
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut at = usize::MAX;
                for a in 0..ph {
                    let row = (ch * h + i * ph + a) * w + j * pw;
                    for (b, &v) in input[row..row + pw].iter().enumerate() {
                        if v > best || at == usize::MAX {
                            best = v;
                            at = row + b;
                        }
                    }
                }
                let k = (ch * oh + i) * ow + j;
                out[k] = best;
                argmax[k] = at as u32;
            }
        }
    }
}

pub(crate) fn maxpool_backward(dout: &[f64], argmax: &[u32], din: &mut [f64]) {
    din.fill(0.0);
    for (&d, &at) in dout.iter().zip(argmax) {
        din[at as usize] += d;
    }
}

/// Rows of a dense layer computed together.
const RB: usize = 4;
/// Samples sharing each weight load in the dense forward kernel.
const SS: usize = 3;
/// Samples sharing one pass in the dense input-gradient kernel.
const SB: usize = 4;
/// Input columns per cache tile in the dense input-gradient kernel.
const CT: usize = 64;
/// Input columns per cache tile in the dense forward kernel.
const JT: usize = 512;

/// `ys[s][o] = bias[o] + dot(W[o], xs[s])` for every sample, bitwise equal
/// to calling `dot` row by row. Columns are tiled so each weight tile is
/// reused across the batch, and each weight load feeds `SS` samples.
pub(crate) fn dense_forward_batch(xs: &[&[f64]], weights: &[f64], bias: &[f64], ys: &mut [&mut [f64]]) {
    let m = bias.len();
    let n = weights.len() / m.max(1);
    let full = n / LANES * LANES;
    let mut accs = vec![[0.0f64; LANES]; xs.len() * m];
    for j0 in (0..full).step_by(JT) {
        let j1 = (j0 + JT).min(full);
        for ob in (0..m).step_by(RB) {
            let rows: [&[f64]; RB] = std::array::from_fn(|q| &weights[(ob + q).min(m - 1) * n..][j0..j1]);
            for s0 in (0..xs.len()).step_by(SS) {
                let sc: [usize; SS] = std::array::from_fn(|t| (s0 + t).min(xs.len() - 1));
                let x: [&[f64]; SS] = std::array::from_fn(|t| &xs[sc[t]][j0..j1]);
                let mut acc: [[[f64; LANES]; RB]; SS] =
                    std::array::from_fn(|t| std::array::from_fn(|q| accs[sc[t] * m + (ob + q).min(m - 1)]));
                for j in (0..j1 - j0).step_by(LANES) {
                    let xv: [&[f64; LANES]; SS] = std::array::from_fn(|t| x[t][j..j + LANES].try_into().unwrap());
                    for q in 0..RB {
                        let wv: &[f64; LANES] = rows[q][j..j + LANES].try_into().unwrap();
                        for t in 0..SS {
                            for k in 0..LANES {
                                acc[t][q][k] = madd(wv[k], xv[t][k], acc[t][q][k]);
                            }
                        }
                    }
                }
                for t in 0..SS.min(xs.len() - s0) {
                    for q in 0..RB.min(m - ob) {
                        accs[(s0 + t) * m + ob + q] = acc[t][q];
                    }
                }
            }
        }
    }
    for (s, (x, y)) in xs.iter().zip(ys.iter_mut()).enumerate() {
        for o in 0..m {
            let mut tail = 0.0;
            for j in full..n {
                tail = madd(weights[o * n + j], x[j], tail);
            }
            y[o] = bias[o] + reduce_lanes(&accs[s * m + o], tail);
        }
    }
}

/// `dxs[s][i] = Σ_o dys[s][o]·W[o][i]`, accumulated over `o` in order.
/// Column tiles run outermost so each weight tile stays cached across
/// every sample group.
pub(crate) fn dense_backward_input_batch(weights: &[f64], dys: &[&[f64]], dxs: &mut [&mut [f64]]) {
    let Some(first) = dys.first() else {
        return;
    };
    let m = first.len();
    let n = weights.len() / m.max(1);
    let full = n / BLOCK * BLOCK;
    // groups[g][o][s] = dys[g·SB + s][o], the last sample repeated.
    let groups: Vec<Vec<[f64; SB]>> = dys
        .chunks(SB)
        .map(|dyb| (0..m).map(|o| std::array::from_fn(|s| dyb[s.min(dyb.len() - 1)][o])).collect())
        .collect();
    for j0 in (0..full).step_by(CT) {
        let j1 = (j0 + CT).min(full);
        for (group, dxb) in groups.iter().zip(dxs.chunks_mut(SB)) {
            for jb in (j0..j1).step_by(BLOCK) {
                let mut acc = [[0.0f64; BLOCK]; SB];
                for (o, d) in group.iter().enumerate() {
                    let wv: &[f64; BLOCK] = weights[o * n + jb..][..BLOCK].try_into().unwrap();
                    for s in 0..SB {
                        for k in 0..BLOCK {
                            acc[s][k] = madd(d[s], wv[k], acc[s][k]);
                        }
                    }
                }
                for (dx, a) in dxb.iter_mut().zip(&acc) {
                    dx[jb..jb + BLOCK].copy_from_slice(a);
                }
            }
        }
    }
    for j in full..n {
        for (dy, dx) in dys.iter().zip(dxs.iter_mut()) {
            let mut acc = 0.0;
            for o in 0..m {
                acc = madd(dy[o], weights[o * n + j], acc);
            }
            dx[j] = acc;
        }
    }
}

/// Writes the batch sums `dW[o][i] = Σ_s dys[s][o]·xs[s][i]` and
/// `db[o] = Σ_s dys[s][o]`, accumulated over samples in order.
pub(crate) fn dense_params_batch(xs: &[&[f64]], dys: &[&[f64]], dweights: &mut [f64], dbias: &mut [f64]) {
    let m = dbias.len();
    let n = dweights.len() / m.max(1);
    for (o, db) in dbias.iter_mut().enumerate() {
        *db = dys.iter().fold(0.0, |a, d| a + d[o]);
    }
    let mut jb = 0;
    while jb + BLOCK <= n {
        for ob in (0..m).step_by(PB) {
            let mut acc = [[0.0f64; BLOCK]; PB];
            for (x, dy) in xs.iter().zip(dys) {
                let xv: &[f64; BLOCK] = x[jb..jb + BLOCK].try_into().unwrap();
                for q in 0..PB {
                    let d = dy[(ob + q).min(m - 1)];
                    for k in 0..BLOCK {
                        acc[q][k] = madd(d, xv[k], acc[q][k]);
                    }
                }
            }
            for (q, a) in acc.iter().enumerate().take(PB.min(m - ob)) {
                dweights[(ob + q) * n + jb..][..BLOCK].copy_from_slice(a);
            }
        }
        jb += BLOCK;
    }
    for j in jb..n {
        for o in 0..m {
            dweights[o * n + j] = xs.iter().zip(dys).fold(0.0, |a, (x, d)| madd(d[o], x[j], a));
        }
    }
}

/// `a·b + c`, fused when the target has FMA.
#[inline(always)]
pub(crate) fn madd(a: f64, b: f64, c: f64) -> f64 {
    if cfg!(target_feature = "fma") {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// Fixed reduction order shared by every lane-parallel sum.
#[inline]
fn reduce_lanes(acc: &[f64; LANES], tail: f64) -> f64 {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Eight-lane dot product with a fixed reduction order.
#[cfg(test)]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = madd(x[l], y[l], acc[l]);
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail = madd(*x, *y, tail);
    }
    reduce_lanes(&acc, tail)
}

#[inline]
pub(crate) fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let rest: f64 = ca.remainder().iter().sum();
    for x in ca {
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    reduce_lanes(&acc, rest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    /// Direct nested-loop convolution, no decimation.
    fn naive_conv(
        x: &[f64],
        (c, h, w): (usize, usize, usize),
        weights: &[f64],
        bias: &[f64],
        o: usize,
        (kh, kw): (usize, usize),
        (sh, sw): (usize, usize),
    ) -> Vec<f64> {
        let oh = (h - kh) / sh + 1;
        let ow = (w - kw) / sw + 1;
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = bias[oc];
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                s = madd(
                                    weights[((oc * c + ci) * kh + ki) * kw + kj],
                                    x[(ci * h + i * sh + ki) * w + j * sw + kj],
                                    s,
                                );
                            }
                        }
                    }
                    out[(oc * oh + i) * ow + j] = s;
                }
            }
        }
        out
    }

    fn run_conv(x: &[f64], g: &ConvGeom, w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut phased = Vec::new();
        let src = if g.sw > 1 {
            decimate(x, g, &mut phased);
            &phased[..]
        } else {
            x
        };
        let mut out = vec![0.0; g.o * g.oh * g.ow];
        conv_forward(src, g, w, b, &mut out);
        out
    }

    #[test]
    fn conv1d_hand_example() {
        let g = ConvGeom::new((1, 1, 3), 1, (1, 2), (1, 1)).unwrap();
        assert_eq!(run_conv(&[1.0, 2.0, 3.0], &g, &[1.0, 1.0], &[0.0]), vec![3.0, 5.0]);
    }

    #[test]
    fn pool_hand_example_and_ties() {
        let mut out = vec![0.0; 2];
        let mut idx = Vec::new();
        maxpool_forward(&[1.0, 5.0, 2.0, 4.0], (1, 1, 4), (1, 2), &mut out, &mut idx);
        assert_eq!(out, vec![5.0, 4.0]);
        maxpool_forward(&[3.0, 3.0, 1.0, 1.0, 9.0], (1, 1, 5), (1, 2), &mut out, &mut idx);
        assert_eq!(idx, vec![0, 2]);
    }

    proptest! {
        #[test]
        fn conv_matches_naive_exactly(
            seed in any::<u64>(),
            c in 1usize..4, h in 1usize..8, w in 1usize..60, o in 1usize..4,
            kh in 1usize..4, kw in 1usize..9, sh in 1usize..3, sw in 1usize..5,
        ) {
            prop_assume!(kh <= h && kw <= w);
            let mut r = rng::stream(seed, 0, 0);
            let x: Vec<f64> = (0..c * h * w).map(|_| r.gen_range(-1.0..1.0)).collect();
            let wt: Vec<f64> = (0..o * c * kh * kw).map(|_| r.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..o).map(|_| r.gen_range(-1.0..1.0)).collect();
            let g = ConvGeom::new((c, h, w), o, (kh, kw), (sh, sw)).unwrap();
            prop_assert_eq!(run_conv(&x, &g, &wt, &b), naive_conv(&x, (c, h, w), &wt, &b, o, (kh, kw), (sh, sw)));
        }

        #[test]
        fn decimate_interleave_round_trip(c in 1usize..3, h in 1usize..4, w in 1usize..40, sw in 1usize..6) {
            let g = ConvGeom::new((c, h, w), 1, (1, 1), (1, sw)).unwrap();
            let x: Vec<f64> = (0..c * h * w).map(|i| i as f64).collect();
            let mut phased = Vec::new();
            decimate(&x, &g, &mut phased);
            let mut back = vec![0.0; x.len()];
            interleave(&phased, &g, &mut back);
            prop_assert_eq!(back, x);
        }
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + y.abs()))
    }

    fn uniform(r: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    proptest! {
        #[test]
        fn conv_backward_matches_naive(
            seed in any::<u64>(),
            c in 1usize..4, h in 1usize..6, w in 1usize..70, o in 1usize..7,
            kh in 1usize..4, kw in 1usize..9, sh in 1usize..3, sw in 1usize..4,
        ) {
            prop_assume!(kh <= h && kw <= w);
            let mut r = rng::stream(seed, 0, 1);
            let g = ConvGeom::new((c, h, w), o, (kh, kw), (sh, sw)).unwrap();
            let x = uniform(&mut r, c * h * w);
            let wt = uniform(&mut r, o * g.taps());
            let dout = uniform(&mut r, o * g.oh * g.ow);

            let mut dw_ref = vec![0.0; wt.len()];
            let mut db_ref = vec![0.0; o];
            let mut dx_ref = vec![0.0; x.len()];
            for oc in 0..o {
                for i in 0..g.oh {
                    for j in 0..g.ow {
                        let d = dout[(oc * g.oh + i) * g.ow + j];
                        db_ref[oc] += d;
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let t = (ci * kh + ki) * kw + kj;
                                    let xi = (ci * h + i * sh + ki) * w + j * sw + kj;
                                    dw_ref[oc * g.taps() + t] += d * x[xi];
                                    dx_ref[xi] += d * wt[oc * g.taps() + t];
                                }
                            }
                        }
                    }
                }
            }

            let mut phased = Vec::new();
            decimate(&x, &g, &mut phased);
            let (mut dw, mut db) = (vec![0.0; wt.len()], vec![0.0; o]);
            conv_backward_params(&phased, &g, &dout, &mut dw, &mut db);
            let mut dphase = vec![0.0; g.phased_len()];
            conv_backward_input(&g, &wt, &dout, &mut dphase);
            let mut dx = vec![0.0; x.len()];
            interleave(&dphase, &g, &mut dx);
            prop_assert!(close(&dw, &dw_ref));
            prop_assert!(close(&db, &db_ref));
            prop_assert!(close(&dx, &dx_ref));
        }

        #[test]
        fn dense_batch_kernels_match_row_loops(
            seed in any::<u64>(), s in 1usize..20, n in 1usize..700, m in 1usize..12,
        ) {
            let mut r = rng::stream(seed, 0, 2);
            let wt = uniform(&mut r, m * n);
            let b = uniform(&mut r, m);
            let xs: Vec<Vec<f64>> = (0..s).map(|_| uniform(&mut r, n)).collect();
            let dys: Vec<Vec<f64>> = (0..s).map(|_| uniform(&mut r, m)).collect();
            let xr: Vec<&[f64]> = xs.iter().map(|v| &v[..]).collect();
            let dr: Vec<&[f64]> = dys.iter().map(|v| &v[..]).collect();

            let mut ys = vec![vec![0.0; m]; s];
            let mut yr: Vec<&mut [f64]> = ys.iter_mut().map(|v| &mut v[..]).collect();
            dense_forward_batch(&xr, &wt, &b, &mut yr);
            for (x, y) in xs.iter().zip(&ys) {
                for o in 0..m {
                    prop_assert_eq!(y[o], b[o] + dot(&wt[o * n..][..n], x));
                }
            }

            let mut dxs = vec![vec![0.0; n]; s];
            let mut dxr: Vec<&mut [f64]> = dxs.iter_mut().map(|v| &mut v[..]).collect();
            dense_backward_input_batch(&wt, &dr, &mut dxr);
            for (dy, dx) in dys.iter().zip(&dxs) {
                let want: Vec<f64> = (0..n).map(|j| (0..m).map(|o| dy[o] * wt[o * n + j]).sum()).collect();
                prop_assert!(close(dx, &want));
            }

            let (mut dw, mut db) = (vec![0.0; m * n], vec![0.0; m]);
            dense_params_batch(&xr, &dr, &mut dw, &mut db);
            for o in 0..m {
                prop_assert!(close(&[db[o]], &[dys.iter().map(|d| d[o]).sum::<f64>()]));
                let want: Vec<f64> = (0..n).map(|i| (0..s).map(|k| dys[k][o] * xs[k][i]).sum()).collect();
                prop_assert!(close(&dw[o * n..][..n], &want));
            }
        }

        #[test]
        fn pool_pair_fast_path_matches_naive(
            seed in any::<u64>(), c in 1usize..4, h in 1usize..4, w in 2usize..40, ph in 1usize..3, pw in 1usize..4,
        ) {
            prop_assume!(ph <= h && pw <= w);
            let mut r = rng::stream(seed, 0, 3);
            // Coarse values so ties are common.
            let x: Vec<f64> = (0..c * h * w).map(|_| r.gen_range(0..4) as f64).collect();
            let (oh, ow) = (h / ph, w / pw);
            let mut out = vec![0.0; c * oh * ow];
            let mut idx = Vec::new();
            maxpool_forward(&x, (c, h, w), (ph, pw), &mut out, &mut idx);
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut at = (ch * h + i * ph) * w + j * pw;
                        for a in 0..ph {
                            for b in 0..pw {
                                let k = (ch * h + i * ph + a) * w + j * pw + b;
                                if x[k] > x[at] {
                                    at = k;
                                }
                            }
                        }
                        let k = (ch * oh + i) * ow + j;
                        prop_assert_eq!(idx[k] as usize, at);
                        prop_assert_eq!(out[k], x[at]);
                    }
                }
            }
        }
    }

    #[test]
    fn dot_and_sum_agree_with_plain_loops() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64 * 0.11).cos()).collect();
        let plain: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - plain).abs() < 1e-12);
        assert!((sum(&a) - a.iter().sum::<f64>()).abs() < 1e-12);
    }
}
