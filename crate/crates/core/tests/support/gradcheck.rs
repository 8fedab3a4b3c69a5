//! Finite-difference oracle for the analytic training gradients.
#![allow(dead_code)]


use amcf::data::{AspectCatalog, IdMap, Interaction};
use amcf::model::{AmcfModel, AttentionMode, Hyper, MaskMode, Matrix};
use amcf::training::{compute_loss, loss_gradients};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Entries where both sides are below this in magnitude count as agreeing zeros.
pub const ZERO_FLOOR: f64 = 1e-9;

pub fn ratings() -> Vec<Interaction> {
    let mut out = Vec::new();
    for u in 0..5u32 {
        for i in 0..5u32 {
            if (u + 2 * i) % 3 != 0 {
                let rating = 1.0 + ((u * 7 + i * 3) % 5) as f64;
                out.push(Interaction { user: u, item: i, rating, timestamp: 0 });
            }
        }
    }
    out
}

/// 5 users, 5 items, 3 aspects in `R^4`; item 3 has no aspects.
pub fn toy(attn: AttentionMode, mask: MaskMode) -> AmcfModel {
    let catalog = AspectCatalog::new(
        vec!["a".into(), "b".into(), "c".into()],
        vec![vec![1, 0, 0], vec![0, 1, 1], vec![1, 1, 0], vec![0, 0, 0], vec![1, 1, 1]],
    );
    let hyper = Hyper { dim: 4, aspects: 3, lambda: 0.3, attn_mode: attn, mask_mode: mask, ..Hyper::default() };
    let ids = IdMap::from_raw((1..=5).collect());
    let mut model = AmcfModel::new(hyper, catalog, ids.clone(), ids, &ratings(), 0.5, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut w = Matrix::random_normal(4, 4, 0.4, &mut rng);
    for i in 0..4 {
        w.set(i, i, w.get(i, i) + 1.0);
    }
    model.attn_bilinear = w;
    model.user_bias = vec![0.1, -0.2, 0.05, 0.3, -0.1];
    model.item_bias = vec![-0.3, 0.2, 0.1, 0.0, 0.15];
    // larger item norms so the softmax is far from uniform
    for x in model.item_emb.as_mut_slice() {
        *x *= 4.0;
    }
    model
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl Entry {
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < ZERO_FLOOR {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

fn total(model: &AmcfModel, batch: &[Interaction]) -> f64 {
    compute_loss(model, batch).total
}

fn pred_only(model: &AmcfModel, batch: &[Interaction]) -> f64 {
    compute_loss(model, batch).l_pred
}

fn central(
    model: &AmcfModel,
    batch: &[Interaction],
    f: fn(&AmcfModel, &[Interaction]) -> f64,
    param: &dyn Fn(&mut AmcfModel) -> &mut f64,
) -> f64 {
    let mut plus = model.clone();
    *param(&mut plus) += EPS;
    let mut minus = model.clone();
    *param(&mut minus) -= EPS;
    (f(&plus, batch) - f(&minus, batch)) / (2.0 * EPS)
}

fn cell(m: &mut Matrix, r: usize, c: usize) -> &mut f64 {
    &mut m.row_mut(r)[c]
}

fn touched(m: &Matrix, rows: &[usize], r: usize, c: usize) -> f64 {
    if rows.contains(&r) {
        m.get(r, c)
    } else {
        0.0
    }
}

/// Every parameter's analytic and numeric gradient. Shielded item embeddings
/// are compared against the rating loss alone.
pub fn compare(attn: AttentionMode, mask: MaskMode, shield: bool) -> Vec<Entry> {
    let model = toy(attn, mask);
    let batch = ratings();
    let (_, g) = loss_gradients(&model, &batch, shield);
    let mut out = Vec::new();
    let mut push = |name: String, analytic: f64, numeric: f64| out.push(Entry { name, analytic, numeric });
    let item_objective: fn(&AmcfModel, &[Interaction]) -> f64 = if shield { pred_only } else { total };
    for u in 0..5 {
        push(format!("user_bias[{u}]"), g.user_bias[u], central(&model, &batch, total, &|m| &mut m.user_bias[u]));
        for d in 0..4 {
            let num = central(&model, &batch, total, &|m| cell(&mut m.user_emb, u, d));
            push(format!("user_emb[{u},{d}]"), touched(&g.user_emb, &g.touched_users, u, d), num);
        }
    }
    for i in 0..5 {
        push(format!("item_bias[{i}]"), g.item_bias[i], central(&model, &batch, total, &|m| &mut m.item_bias[i]));
        for d in 0..4 {
            let num = central(&model, &batch, item_objective, &|m| cell(&mut m.item_emb, i, d));
            push(format!("item_emb[{i},{d}]"), touched(&g.item_emb, &g.touched_items, i, d), num);
        }
    }
    for k in 0..3 {
        for d in 0..4 {
            let num = central(&model, &batch, total, &|m| cell(&mut m.aspect_emb, k, d));
            push(format!("aspect_emb[{k},{d}]"), g.aspect_emb.get(k, d), num);
        }
    }
    for r in 0..4 {
        for c in 0..4 {
            let num = central(&model, &batch, total, &|m| cell(&mut m.attn_bilinear, r, c));
            push(format!("attn_bilinear[{r},{c}]"), g.attn_bilinear.get(r, c), num);
        }
    }
    out
}

/// Largest relative error over all parameters, with the offending entry.
pub fn worst(entries: &[Entry]) -> (f64, String) {
    entries
        .iter()
        .map(|e| (e.rel_error(), e.name.clone()))
        .fold((0.0, String::new()), |a, b| if b.0 > a.0 { b } else { a })
}
