//! Training objective: hinged score-map losses, GIoU on decoded per-cell boxes, hinged
//! keypoint-offset error and soft-map supervision.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::BBox;
use crate::encoding::{argmax, EncodingConfig, TargetStateMaps, FOREGROUND_THRESHOLD};
use crate::network::NetworkOutputs;
use crate::tensor::{Graph, Tensor, TensorError, Var};

type Result<T> = core::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cls_box: f64,
    pub giou: f64,
    pub cls_kp: f64,
    pub hom: f64,
    pub gmsp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cls_box: 100.0, giou: 10.0, cls_kp: 100.0, hom: 10.0, gmsp: 100.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Radius in cells of the offset supervision disc around each keypoint's peak cell.
    pub hom_radius: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { weights: LossWeights::default(), hom_radius: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub cls_box: f64,
    pub giou: f64,
    pub cls_kp: f64,
    pub hom: f64,
    pub gmsp: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.cls_box, self.giou, self.cls_kp, self.hom, self.gmsp, self.total].iter().all(|v| v.is_finite())
    }
}

fn check_shape(op: &'static str, g: &Graph, v: Var, t: &Tensor) -> Result<()> {
    if g.shape(v) != t.shape() {
        return Err(TensorError::mismatch(op, g.shape(v), t.shape()));
    }
    Ok(())
}

fn mask(target: &Tensor) -> Tensor {
    Tensor::from_fn(target.shape(), |i| if target.data()[i] >= FOREGROUND_THRESHOLD { 1.0 } else { 0.0 })
}

/// Mean over cells and channels of `(p − t)²` on foreground cells and `max(0, p)²` elsewhere.
pub fn cls_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    check_shape("cls_loss", g, pred, target)?;
    let fg = mask(target);
    let bg = Tensor::from_fn(fg.shape(), |i| 1.0 - fg.data()[i]);
    let t = g.constant(target.clone());
    let fg = g.constant(fg);
    let bg = g.constant(bg);
    let diff = g.sub(pred, t)?;
    let diff2 = g.square(diff);
    let fg_term = g.mul(fg, diff2)?;
    let pos = g.relu(pred);
    let pos2 = g.square(pos);
    let bg_term = g.mul(bg, pos2)?;
    let both = g.add(fg_term, bg_term)?;
    Ok(g.mean(both))
}

/// GIoU of two boxes; the enclosing box of disjoint boxes makes it negative.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let c = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if c > 0.0 {
        iou - (c - union) / c
    } else {
        iou
    }
}

/// Mean of `1 − GIoU` between boxes decoded from predicted and target LTRB offsets, over
/// foreground cells of `gm`. Zero when there is no foreground.
pub fn giou_loss(g: &mut Graph, om_hat: Var, om: &Tensor, gm: &Tensor, cfg: &EncodingConfig) -> Result<Var> {
    check_shape("giou_loss", g, om_hat, om)?;
    let (h, w) = (cfg.feat_h, cfg.feat_w);
    let hw = h * w;
    let fg = mask(gm);
    let nfg = fg.sum();
    if nfg == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let cx = Tensor::from_fn(&[1, h, w], |i| cfg.cell_center(i % w, i / w).0);
    let cy = Tensor::from_fn(&[1, h, w], |i| cfg.cell_center(i % w, i / w).1);
    // target box edges per cell, decoded from the stored offsets
    let edge = |c: usize, centre: &Tensor| Tensor::from_fn(&[1, h, w], |i| centre.data()[i] - om.data()[c * hw + i]);
    let (gx1, gy1, gx2, gy2) = (edge(0, &cx), edge(1, &cy), edge(2, &cx), edge(3, &cy));
    let g_area = Tensor::from_fn(&[1, h, w], |i| {
        (gx2.data()[i] - gx1.data()[i]).max(0.0) * (gy2.data()[i] - gy1.data()[i]).max(0.0)
    });
    let cxv = g.constant(cx);
    let cyv = g.constant(cy);
    let mut pred = Vec::with_capacity(4);
    for c in 0..4 {
        let o = g.narrow(om_hat, 0, c, 1)?;
        let centre = if c % 2 == 0 { cxv } else { cyv };
        pred.push(g.sub(centre, o)?);
    }
    let [px1, py1, px2, py2] = [pred[0], pred[1], pred[2], pred[3]];
    let [gx1, gy1, gx2, gy2] = [gx1, gy1, gx2, gy2].map(|t| g.constant(t));

    let pw = g.sub(px2, px1)?;
    let pw = g.relu(pw);
    let ph = g.sub(py2, py1)?;
    let ph = g.relu(ph);
    let p_area = g.mul(pw, ph)?;

    let ix1 = g.maximum(px1, gx1)?;
    let iy1 = g.maximum(py1, gy1)?;
    let ix2 = g.minimum(px2, gx2)?;
    let iy2 = g.minimum(py2, gy2)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;

    let g_area = g.constant(g_area);
    let union = g.add(p_area, g_area)?;
    let union = g.sub(union, inter)?;

    let cx1 = g.minimum(px1, gx1)?;
    let cy1 = g.minimum(py1, gy1)?;
    let cx2 = g.maximum(px2, gx2)?;
    let cy2 = g.maximum(py2, gy2)?;
    let cw = g.sub(cx2, cx1)?;
    let ch = g.sub(cy2, cy1)?;
    let c_area = g.mul(cw, ch)?;

    // 1 − GIoU = 1 − inter/union + (C − union)/C = 2 − inter/union − union/C
    let iou = g.div(inter, union)?;
    let cover = g.div(union, c_area)?;
    let s = g.add(iou, cover)?;
    let neg = g.scale(s, -1.0);
    let per_cell = g.add_scalar(neg, 2.0);
    let m = g.constant(fg);
    let masked = g.mul(per_cell, m)?;
    let total = g.sum(masked);
    Ok(g.scale(total, 1.0 / nfg))
}

/// Cell indices within `radius` cells of `(px, py)`.
fn disc(px: usize, py: usize, radius: f64, h: usize, w: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - px as f64, y as f64 - py as f64);
            if dx * dx + dy * dy <= radius * radius {
                out.push(y * w + x);
            }
        }
    }
    out
}

/// Squared offset error averaged over the two components and over the cells within
/// `radius` of each visible keypoint's peak cell, then over visible keypoints.
pub fn hinged_offset_mse(
    g: &mut Graph,
    om_hat: Var,
    om: &Tensor,
    visible: &[bool],
    gm: &Tensor,
    radius: f64,
    cfg: &EncodingConfig,
) -> Result<Var> {
    check_shape("hinged_offset_mse", g, om_hat, om)?;
    let (h, w) = (cfg.feat_h, cfg.feat_w);
    let hw = h * w;
    let n_vis = visible.iter().filter(|&&v| v).count();
    if n_vis == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut weights = Tensor::zeros(om.shape());
    for (i, _) in visible.iter().enumerate().filter(|(_, &v)| v) {
        let (j, _) = argmax(&gm.data()[i * hw..(i + 1) * hw]);
        let cells = disc(j % w, j / w, radius, h, w);
        let wv = 1.0 / (2.0 * cells.len() as f64 * n_vis as f64);
        for c in cells {
            weights.data_mut()[2 * i * hw + c] = wv;
            weights.data_mut()[(2 * i + 1) * hw + c] = wv;
        }
    }
    let t = g.constant(om.clone());
    let diff = g.sub(om_hat, t)?;
    let sq = g.square(diff);
    let wv = g.constant(weights);
    let weighted = g.mul(sq, wv)?;
    Ok(g.sum(weighted))
}

/// Graph handles of the individual loss terms and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub cls_box: Var,
    pub giou: Var,
    pub cls_kp: Var,
    pub hom: Var,
    pub gmsp: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn report(&self, g: &Graph) -> LossReport {
        let v = |x: Var| g.value(x).item();
        LossReport {
            cls_box: v(self.cls_box),
            giou: v(self.giou),
            cls_kp: v(self.cls_kp),
            hom: v(self.hom),
            gmsp: v(self.gmsp),
            total: v(self.total),
        }
    }
}

/// Test-frame terms against `test`, soft-map term against each train frame's all-object map.
pub fn total_loss(
    g: &mut Graph,
    out: &NetworkOutputs,
    test: &TargetStateMaps,
    train: &[&TargetStateMaps],
    lc: &LossConfig,
    cfg: &EncodingConfig,
) -> Result<LossTerms> {
    let cls_box = cls_loss(g, out.bbox_gm, &test.bbox_gm)?;
    let giou = giou_loss(g, out.bbox_om, &test.bbox_om, &test.bbox_gm, cfg)?;
    let cls_kp = cls_loss(g, out.kp_gm, &test.kp_gm)?;
    let hom = hinged_offset_mse(g, out.kp_om, &test.kp_om, &test.visible, &test.kp_gm, lc.hom_radius, cfg)?;
    let gmsp = if out.gmsp_train.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        if out.gmsp_train.len() != train.len() {
            return Err(TensorError::dim("total_loss", "one soft-map target per train frame"));
        }
        let mut terms = Vec::with_capacity(train.len());
        for (&pred, maps) in out.gmsp_train.iter().zip(train) {
            terms.push(cls_loss(g, pred, &maps.kp_gmsp)?);
        }
        let s = g.add_all(&terms)?;
        g.scale(s, 1.0 / terms.len() as f64)
    };
    let lw = &lc.weights;
    let parts = [
        g.scale(cls_box, lw.cls_box),
        g.scale(giou, lw.giou),
        g.scale(cls_kp, lw.cls_kp),
        g.scale(hom, lw.hom),
        g.scale(gmsp, lw.gmsp),
    ];
    let total = g.add_all(&parts)?;
    Ok(LossTerms { cls_box, giou, cls_kp, hom, gmsp, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Annotation, Keypoint};
    use crate::encoding::bbox_offset_map;
    use crate::network::tests::{annotation, random_image, tiny_config};
    use crate::network::{StepModel, TrainFrame};
    use crate::param::ParamStore;
    use crate::tensor::gradcheck::grad_check_params;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn value(g: &Graph, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn cls_loss_hand_values() {
        let target = Tensor::new(&[1, 1, 3], vec![0.8, 0.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let p = g.constant(target.clone());
        let l = cls_loss(&mut g, p, &target).unwrap();
        assert_eq!(value(&g, l), 0.0);
        // background −0.3 contributes nothing; background 0.5 contributes 0.25
        let p = g.constant(Tensor::new(&[1, 1, 3], vec![0.8, -0.3, 0.5]).unwrap());
        let l = cls_loss(&mut g, p, &target).unwrap();
        assert!((value(&g, l) - 0.25 / 3.0).abs() < 1e-15);
        let bad = g.constant(Tensor::zeros(&[1, 1, 2]));
        assert!(cls_loss(&mut g, bad, &target).is_err());
    }

    #[test]
    fn giou_hand_values() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(giou(&a, &a), 1.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        assert!((1.0 - giou(&a, &b) - 2.0 / 3.0).abs() < 1e-12);
        let far = BBox::new(1000.0, 1000.0, 1010.0, 1010.0);
        assert!(giou(&a, &far) < -0.99);
    }

    fn single_cell_cfg() -> EncodingConfig {
        EncodingConfig { feat_h: 1, feat_w: 1, num_keypoints: 1, ..EncodingConfig::default() }
    }

    fn giou_loss_of(pred: &BBox, gt: &BBox, cfg: &EncodingConfig) -> f64 {
        let mut g = Graph::new();
        let p = g.constant(bbox_offset_map(pred, cfg));
        let gm = Tensor::full(&[1, cfg.feat_h, cfg.feat_w], 1.0);
        let l = giou_loss(&mut g, p, &bbox_offset_map(gt, cfg), &gm, cfg).unwrap();
        value(&g, l)
    }

    #[test]
    fn giou_loss_worked_case() {
        let c = single_cell_cfg();
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        assert!((giou_loss_of(&b, &a, &c) - 2.0 / 3.0).abs() < 1e-9);
        assert!(giou_loss_of(&a, &a, &c).abs() < 1e-15);
        let far = BBox::new(1000.0, 1000.0, 1010.0, 1010.0);
        assert!(giou_loss_of(&far, &a, &c) > 1.99);
        // inverted prediction: no intersection, loss stays finite
        let inv = BBox::new(10.0, 10.0, 0.0, 0.0);
        let l = giou_loss_of(&inv, &a, &c);
        assert!(l.is_finite() && l >= 1.0);
    }

    #[test]
    fn giou_loss_without_foreground_is_zero() {
        let c = EncodingConfig { feat_h: 2, feat_w: 2, ..single_cell_cfg() };
        let mut g = Graph::new();
        let p = g.constant(Tensor::full(&[4, 2, 2], 3.0));
        let l = giou_loss(&mut g, p, &Tensor::zeros(&[4, 2, 2]), &Tensor::zeros(&[1, 2, 2]), &c).unwrap();
        assert_eq!(value(&g, l), 0.0);
    }

    #[test]
    fn offset_mse_hand_values() {
        let c = single_cell_cfg();
        let om = Tensor::new(&[2, 1, 1], vec![1.0, 2.0]).unwrap();
        let gm = Tensor::full(&[1, 1, 1], 1.0);
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(&[2, 1, 1], vec![4.0, 6.0]).unwrap());
        let l = hinged_offset_mse(&mut g, p, &om, &[true], &gm, 2.0, &c).unwrap();
        assert!((value(&g, l) - 12.5).abs() < 1e-12);
        let l = hinged_offset_mse(&mut g, p, &om, &[false], &gm, 2.0, &c).unwrap();
        assert_eq!(value(&g, l), 0.0);
        let exact = g.constant(om.clone());
        let l = hinged_offset_mse(&mut g, exact, &om, &[true], &gm, 2.0, &c).unwrap();
        assert_eq!(value(&g, l), 0.0);
    }

    #[test]
    fn offset_mse_uses_the_radius_disc() {
        // 5×5 grid, peak at the centre: radius 2 covers 13 cells
        let c = EncodingConfig { feat_h: 5, feat_w: 5, ..single_cell_cfg() };
        let mut gm = Tensor::zeros(&[1, 5, 5]);
        gm.set(&[0, 2, 2], 1.0);
        let om = Tensor::zeros(&[2, 5, 5]);
        let mut g = Graph::new();
        let p = g.constant(Tensor::full(&[2, 5, 5], 1.0));
        let l = hinged_offset_mse(&mut g, p, &om, &[true], &gm, 2.0, &c).unwrap();
        assert!((value(&g, l) - 1.0).abs() < 1e-12);
        let mut far = Tensor::zeros(&[2, 5, 5]);
        far.set(&[0, 0, 0], 100.0);
        let p = g.constant(far);
        let l = hinged_offset_mse(&mut g, p, &om, &[true], &gm, 2.0, &c).unwrap();
        assert_eq!(value(&g, l), 0.0);
    }

    /// Score maps with sub-threshold tails cleared, the zero-loss prediction under the hinge.
    fn ideal(t: &Tensor) -> Tensor {
        Tensor::from_fn(t.shape(), |i| {
            let v = t.data()[i];
            if v >= FOREGROUND_THRESHOLD {
                v
            } else {
                0.0
            }
        })
    }

    fn perfect_outputs(g: &mut Graph, maps: &TargetStateMaps) -> NetworkOutputs {
        let w = g.constant(Tensor::zeros(&[1, 1]));
        NetworkOutputs {
            bbox_gm: g.constant(ideal(&maps.bbox_gm)),
            bbox_om: g.constant(maps.bbox_om.clone()),
            kp_gm: g.constant(ideal(&maps.kp_gm)),
            kp_om: g.constant(maps.kp_om.clone()),
            gmsp_train: vec![g.constant(ideal(&maps.kp_gmsp))],
            gmsp_test: None,
            weights: crate::network::ModelWeights { w_loc: w, w_br: w, w_kloc: w, w_kp: w },
            z_test: w,
        }
    }

    fn maps() -> (TargetStateMaps, EncodingConfig) {
        let cfg = EncodingConfig { num_keypoints: 3, ..EncodingConfig::default() };
        let ann = Annotation {
            target_id: 1,
            bbox: BBox::new(40.0, 60.0, 200.0, 240.0),
            keypoints: vec![Keypoint::new(60.0, 80.0, 2), Keypoint::new(150.0, 200.0, 1), Keypoint::new(0.0, 0.0, 0)],
        };
        (TargetStateMaps::new(&ann, core::slice::from_ref(&ann), &cfg), cfg)
    }

    #[test]
    fn perfect_predictions_give_zero_total() {
        let (m, cfg) = maps();
        let mut g = Graph::new();
        let out = perfect_outputs(&mut g, &m);
        let terms = total_loss(&mut g, &out, &m, &[&m], &LossConfig::default(), &cfg).unwrap();
        let r = terms.report(&g);
        assert!(r.total.abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn total_combines_weighted_terms() {
        let (m, cfg) = maps();
        let mut g = Graph::new();
        let mut out = perfect_outputs(&mut g, &m);
        // shift the predicted box so only the GIoU term is nonzero
        let shifted = bbox_offset_map(&BBox::new(50.0, 60.0, 210.0, 240.0), &cfg);
        out.bbox_om = g.constant(shifted);
        let terms = total_loss(&mut g, &out, &m, &[&m], &LossConfig::default(), &cfg).unwrap();
        let r = terms.report(&g);
        assert!(r.giou > 0.0);
        assert_eq!((r.cls_box, r.cls_kp, r.hom, r.gmsp), (0.0, 0.0, 0.0, 0.0));
        assert!((r.total - 10.0 * r.giou).abs() < 1e-12);
        assert_eq!(
            LossWeights::default(),
            LossWeights { cls_box: 100.0, giou: 10.0, cls_kp: 100.0, hom: 10.0, gmsp: 100.0 }
        );
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        for use_gmsp in [true, false] {
            let cfg = tiny_config(use_gmsp);
            let (model, mut store): (StepModel, ParamStore) = StepModel::new(&cfg, 7).unwrap();
            let (a, b, t) = (annotation(0.0), annotation(3.0), annotation(6.0));
            let enc = &cfg.encoding;
            let ma = TargetStateMaps::new(&a, core::slice::from_ref(&a), enc);
            let mb = TargetStateMaps::new(&b, core::slice::from_ref(&b), enc);
            let mt = TargetStateMaps::new(&t, core::slice::from_ref(&t), enc);
            let (ia, ib, it) = (random_image(&cfg, 1), random_image(&cfg, 2), random_image(&cfg, 3));
            let lc = LossConfig::default();
            let train = [TrainFrame { image: &ia, maps: &ma }, TrainFrame { image: &ib, maps: &mb }];
            // detached soft maps are held at their base values while parameters move
            let mut g = Graph::new();
            let base = model.full_forward(&mut g, &store, &train, &it).unwrap();
            let soft_train: Vec<Tensor> = base.gmsp_train.iter().map(|&v| g.value(v).clone()).collect();
            let soft_test = base.gmsp_test.map(|v| g.value(v).clone());
            let report = grad_check_params(
                &mut store,
                |g, s| {
                    let frozen = soft_test.as_ref().map(|t| (soft_train.as_slice(), t));
                    let out = model.forward_with_soft(g, s, &train, &it, frozen)?;
                    Ok(total_loss(g, &out, &mt, &[&ma, &mb], &lc, enc)?.total)
                },
                1e-5,
                1e-4,
                2,
                0,
            )
            .unwrap();
            assert!(report.passed(), "use_gmsp={use_gmsp}: {report:?}");
        }
    }

    fn grads_of(use_gmsp: bool, pick: fn(&LossTerms) -> Var) -> (ParamStore, Vec<Tensor>) {
        let cfg = tiny_config(use_gmsp);
        let (model, mut store) = StepModel::new(&cfg, 3).unwrap();
        let (a, t) = (annotation(0.0), annotation(5.0));
        let enc = &cfg.encoding;
        let ma = TargetStateMaps::new(&a, core::slice::from_ref(&a), enc);
        let mt = TargetStateMaps::new(&t, core::slice::from_ref(&t), enc);
        let (ia, it) = (random_image(&cfg, 4), random_image(&cfg, 5));
        let mut g = Graph::new();
        let out = model.full_forward(&mut g, &store, &[TrainFrame { image: &ia, maps: &ma }], &it).unwrap();
        let terms = total_loss(&mut g, &out, &mt, &[&ma], &LossConfig::default(), enc).unwrap();
        store.zero_grads();
        g.backward(pick(&terms), &mut store).unwrap();
        let grads = store.iter().map(|p| p.grad.clone()).collect();
        (store, grads)
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for use_gmsp in [true, false] {
            let (store, grads) = grads_of(use_gmsp, |t| t.total);
            for (p, gr) in store.iter().zip(&grads) {
                assert!(gr.data().iter().any(|&v| v != 0.0), "use_gmsp={use_gmsp}: {} has zero gradient", p.name);
            }
        }
    }

    #[test]
    fn soft_map_module_learns_only_from_its_supervision() {
        let (store, total) = grads_of(true, |t| t.total);
        let (_, sup) = grads_of(true, |t| t.gmsp);
        let mut seen = 0;
        for ((p, gt), gs) in store.iter().zip(&total).zip(&sup) {
            if p.name.starts_with("gmsp.") {
                seen += 1;
                for (a, b) in gt.data().iter().zip(gs.data()) {
                    assert!((a - 100.0 * b).abs() <= 1e-9 * (1.0 + a.abs()), "{}", p.name);
                }
            }
        }
        assert!(seen > 0);
    }

    proptest! {
        #[test]
        fn giou_loss_is_scale_invariant(
            x1 in 0.0f64..100.0, y1 in 0.0f64..100.0, w1 in 5.0f64..100.0, h1 in 5.0f64..100.0,
            x2 in 0.0f64..100.0, y2 in 0.0f64..100.0, w2 in 5.0f64..100.0, h2 in 5.0f64..100.0,
        ) {
            let a = BBox::new(x1, y1, x1 + w1, y1 + h1);
            let b = BBox::new(x2, y2, x2 + w2, y2 + h2);
            let c = single_cell_cfg();
            let l1 = giou_loss_of(&a, &b, &c);
            // doubling boxes and grid: stride 32 puts the cell centre at 16 = 2·8
            let c2 = EncodingConfig { stride: 32, ..c };
            let l2 = giou_loss_of(&a.scaled(2.0, 2.0), &b.scaled(2.0, 2.0), &c2);
            prop_assert!((l1 - l2).abs() < 1e-12);
            prop_assert!((l1 - (1.0 - giou(&a, &b))).abs() < 1e-12);
        }

        #[test]
        fn cls_hinge_ignores_negative_background(p in -5.0f64..0.0, q in -5.0f64..0.0) {
            let target = Tensor::zeros(&[1, 1, 1]);
            let mut g = Graph::new();
            let a = g.constant(Tensor::full(&[1, 1, 1], p));
            let b = g.constant(Tensor::full(&[1, 1, 1], q));
            let la = cls_loss(&mut g, a, &target).unwrap();
            let lb = cls_loss(&mut g, b, &target).unwrap();
            prop_assert_eq!(value(&g, la), value(&g, lb));
        }

        #[test]
        fn total_loss_is_nonnegative(seed in 0u64..200) {
            let (m, cfg) = maps();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let mut out = perfect_outputs(&mut g, &m);
            out.bbox_gm = g.constant(Tensor::from_fn(&[1, 18, 18], |_| r.gen_range(-1.0..1.0)));
            out.kp_om = g.constant(Tensor::from_fn(&[6, 18, 18], |_| r.gen_range(-50.0..50.0)));
            out.bbox_om = g.constant(Tensor::from_fn(&[4, 18, 18], |_| r.gen_range(-200.0..200.0)));
            let t = total_loss(&mut g, &out, &m, &[&m], &LossConfig::default(), &cfg).unwrap().report(&g);
            prop_assert!(t.total >= 0.0 && t.giou >= 0.0 && t.hom >= 0.0 && t.cls_box >= 0.0);
        }
    }
}
