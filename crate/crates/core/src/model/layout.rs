//! Offsets of every tensor in the flat parameter vector.
//!
//! Order (also the checkpoint order): token embedding `T x D`, position
//! embedding `C x D`; per layer: `ln1_g`, `ln1_b` (D), `wq`, `wk`, `wv`,
//! `wo` (D x D), `ln2_g`, `ln2_b` (D), `w1` (D x H), `b1` (H), `w2` (H x D),
//! `b2` (D); then `lnf_g`, `lnf_b` (D), `head_w` (D x O), `head_b` (O).

#[derive(Clone, Debug)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub out_width: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(
        vocab: usize,
        dim: usize,
        context: usize,
        layers: usize,
        hidden: usize,
        out_width: usize,
    ) -> Self {
        let mut at = 0;
        let mut take = |len: usize| {
            let start = at;
            at += len;
            start
        };
        let tok_emb = take(vocab * dim);
        let pos_emb = take(context * dim);
        let layers = (0..layers)
            .map(|_| LayerOffsets {
                ln1_g: take(dim),
                ln1_b: take(dim),
                wq: take(dim * dim),
                wk: take(dim * dim),
                wv: take(dim * dim),
                wo: take(dim * dim),
                ln2_g: take(dim),
                ln2_b: take(dim),
                w1: take(dim * hidden),
                b1: take(hidden),
                w2: take(hidden * dim),
                b2: take(dim),
            })
            .collect();
        let lnf_g = take(dim);
        let lnf_b = take(dim);
        let head_w = take(dim * out_width);
        let head_b = take(out_width);
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            out_width,
            total: at,
        }
    }
}
