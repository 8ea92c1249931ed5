//! Question, answer and image embeddings.
//!
//! Questions: word embedding, a width-3 temporal convolution, and two LSTMs of
//! hidden size `d/2` (one over the embeddings, one over the convolution
//! output) whose per-step outputs are concatenated into `Q ∈ R^{n_q×d}`.
//! Answers: one embedding row per whole (possibly multi-word) answer string.
//! Images: precomputed feature grids read from the binary feature format.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::dropout::{DropoutPlan, Site};
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Word vocabulary with ids 0 (padding) and 1 (unknown) reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        let mut v = Self {
            tokens: vec!["<pad>".into(), "<unk>".into()],
            index: HashMap::new(),
        };
        for t in tokens {
            let t = t.as_ref();
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Contract(format!("invalid vocabulary token {t:?}")));
            }
            if v.index.contains_key(t) {
                return Err(Error::Contract(format!("duplicate vocabulary token {t:?}")));
            }
            v.index.insert(t.to_string(), v.tokens.len());
            v.tokens.push(t.to_string());
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Ids cut or zero-padded to exactly `n_q` entries.
    pub fn encode<S: AsRef<str>>(&self, words: &[S], n_q: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = words.iter().take(n_q).map(|w| self.id(w.as_ref())).collect();
        ids.resize(n_q, PAD);
        ids
    }

    /// One token per line; line `k` (0-based) holds id `k + 2`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[2..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(s: &str) -> Result<Self> {
        let tokens: Vec<&str> = s.lines().collect();
        Self::new(&tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file_string(&fs::read_to_string(path)?)
    }
}

/// Lowercase and collapse whitespace to single spaces.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Maps whole answer strings to rows of an answer embedding table. Row 0 is
/// shared by every answer outside the vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerVocab {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    pub fn new<S: AsRef<str>>(answers: &[S]) -> Self {
        let mut index = HashMap::new();
        let mut list = Vec::new();
        for a in answers {
            let a = normalize_answer(a.as_ref());
            if !index.contains_key(&a) {
                index.insert(a.clone(), list.len() + 1);
                list.push(a);
            }
        }
        Self {
            answers: list,
            index,
        }
    }

    /// Table rows including the shared unknown row.
    pub fn rows(&self) -> usize {
        self.answers.len() + 1
    }

    pub fn id(&self, answer: &str) -> usize {
        self.index.get(&normalize_answer(answer)).copied().unwrap_or(0)
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }
}

/// `table[ids[i]]` row by row.
pub fn embed_tokens(ids: &[usize], table: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let t = g.constant(table.clone());
    let out = g.gather(t, ids)?;
    Ok(g.value(out).clone())
}

/// `out[t] = bias + Σ_{τ∈{−1,0,1}} x[t+τ]·kernel[τ]` with zero rows outside
/// the sequence. `kernel` is `[3, d_in, d_out]`, tap order `t−1, t, t+1`.
pub fn temporal_conv3(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, k, b) = (
        g.constant(x.clone()),
        g.constant(kernel.clone()),
        g.constant(bias.clone()),
    );
    let out = g.conv3(x, k, b)?;
    Ok(g.value(out).clone())
}

/// LSTM weights with the four gates packed column-wise in the order
/// input, forget, output, cell candidate.
#[derive(Clone, Debug)]
pub struct LstmWeights {
    /// `[d_in × 4h]`
    pub w: Tensor,
    /// `[h × 4h]`
    pub u: Tensor,
    /// `[4h]`
    pub b: Tensor,
}

impl LstmWeights {
    pub fn hidden(&self) -> usize {
        self.u.shape()[0]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmNodes {
    pub w: NodeId,
    pub u: NodeId,
    pub b: NodeId,
}

/// Standard LSTM (no peepholes) over the rows of `x`; returns every hidden state.
pub fn lstm_graph(
    g: &mut Graph,
    x: NodeId,
    p: LstmNodes,
    h0: Option<NodeId>,
    c0: Option<NodeId>,
) -> Result<NodeId> {
    let h = g.value(p.u).shape()[0];
    let (n, _) = match g.value(x).shape() {
        [n, d] => (*n, *d),
        s => return dim_err(format!("lstm input must be a matrix, got {s:?}")),
    };
    if g.value(p.u).shape() != [h, 4 * h] || g.value(p.b).shape() != [4 * h] {
        return dim_err(format!(
            "lstm recurrent {:?} / bias {:?} inconsistent with hidden size {h}",
            g.value(p.u).shape(),
            g.value(p.b).shape()
        ));
    }
    let xw = g.matmul(x, p.w)?;
    let xw = g.add_row_bias(xw, p.b)?;
    let mut hp = h0;
    let mut cp = c0;
    let mut outs = Vec::with_capacity(n);
    for t in 0..n {
        let mut z = g.slice_row(xw, t)?;
        if let Some(hp) = hp {
            let r = g.matmul(hp, p.u)?;
            z = g.add(z, r)?;
        }
        let i = g.slice_cols(z, 0, h)?;
        let i = g.sigmoid(i)?;
        let f = g.slice_cols(z, h, h)?;
        let f = g.sigmoid(f)?;
        let o = g.slice_cols(z, 2 * h, h)?;
        let o = g.sigmoid(o)?;
        let c_hat = g.slice_cols(z, 3 * h, h)?;
        let c_hat = g.tanh(c_hat)?;
        let ig = g.mul(i, c_hat)?;
        let c = match cp {
            Some(cp) => {
                let fc = g.mul(f, cp)?;
                g.add(fc, ig)?
            }
            None => ig,
        };
        let tc = g.tanh(c)?;
        let hn = g.mul(o, tc)?;
        outs.push(hn);
        hp = Some(hn);
        cp = Some(c);
    }
    g.concat_rows(&outs)
}

/// Eager LSTM; zero initial states unless given (`[1×h]` each).
pub fn lstm_forward(
    x: &Tensor,
    p: &LstmWeights,
    h0: Option<&Tensor>,
    c0: Option<&Tensor>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let nodes = LstmNodes {
        w: g.constant(p.w.clone()),
        u: g.constant(p.u.clone()),
        b: g.constant(p.b.clone()),
    };
    let h0 = h0.map(|t| g.constant(t.clone()));
    let c0 = c0.map(|t| g.constant(t.clone()));
    let out = lstm_graph(&mut g, xn, nodes, h0, c0)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

impl LstmParams {
    fn create(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, h: usize) -> Self {
        let w = init.xavier(d_in, 4 * h);
        let u = init.xavier(h, 4 * h);
        let mut b = vec![0.0; 4 * h];
        // forget gate bias starts at 1
        for v in &mut b[h..2 * h] {
            *v = 1.0;
        }
        Self {
            w: store.add(format!("{name}.w"), w),
            u: store.add(format!("{name}.u"), u),
            b: store.add(format!("{name}.b"), Tensor::from_parts(vec![4 * h], b)),
        }
    }

    fn nodes(&self, b: &Bound) -> LstmNodes {
        LstmNodes {
            w: b.node(self.w),
            u: b.node(self.u),
            b: b.node(self.b),
        }
    }
}

/// Parameter handles of the question encoder.
#[derive(Clone, Copy, Debug)]
pub struct QuestionEncoderParams {
    pub table: ParamId,
    pub conv_kernel: ParamId,
    pub conv_bias: ParamId,
    pub lstm_words: LstmParams,
    pub lstm_conv: LstmParams,
    pub d: usize,
}

impl QuestionEncoderParams {
    pub(crate) fn create(
        store: &mut ParamStore,
        init: &mut Init,
        vocab_size: usize,
        d: usize,
    ) -> Result<Self> {
        if d % 2 != 0 || d == 0 {
            return Err(Error::Contract(format!("question dimension d={d} must be even")));
        }
        let table = init.uniform(&[vocab_size, d], (3.0 / d as f64).sqrt());
        let kb = (6.0 / (4 * d) as f64).sqrt();
        let kernel = init.uniform(&[3, d, d], kb);
        Ok(Self {
            table: store.add("question.embedding", table),
            conv_kernel: store.add("question.conv.kernel", kernel),
            conv_bias: store.add("question.conv.bias", Tensor::zeros(&[d])),
            lstm_words: LstmParams::create(store, init, "question.lstm_words", d, d / 2),
            lstm_conv: LstmParams::create(store, init, "question.lstm_conv", d, d / 2),
            d,
        })
    }
}

pub(crate) fn apply_dropout(
    g: &mut Graph,
    x: NodeId,
    plan: Option<&DropoutPlan>,
    site: Site,
) -> Result<NodeId> {
    match plan.and_then(|p| p.mask(site, g.value(x).shape())) {
        Some(m) => {
            let m = g.constant(m);
            g.mul(x, m)
        }
        None => Ok(x),
    }
}

/// `Q = [LSTM_words(E) | LSTM_conv(conv3(E))]` with `E` the word embeddings.
pub fn question_encode_graph(
    g: &mut Graph,
    b: &Bound,
    p: &QuestionEncoderParams,
    ids: &[usize],
    plan: Option<&DropoutPlan>,
) -> Result<NodeId> {
    let e = g.gather(b.node(p.table), ids)?;
    let e = apply_dropout(g, e, plan, Site::WordEmbedding)?;
    let c = g.conv3(e, b.node(p.conv_kernel), b.node(p.conv_bias))?;
    let ha = lstm_graph(g, e, p.lstm_words.nodes(b), None, None)?;
    let hb = lstm_graph(g, c, p.lstm_conv.nodes(b), None, None)?;
    let q = g.concat_cols(&[ha, hb])?;
    apply_dropout(g, q, plan, Site::Lstm)
}

/// Answer embedding rows for a candidate list (no convolution or recurrence).
pub fn answer_embed_graph(g: &mut Graph, table: NodeId, answer_ids: &[usize]) -> Result<NodeId> {
    g.gather(table, answer_ids)
}

/// Eager answer embedding: normalises each candidate and looks up its row.
pub fn answer_embed<S: AsRef<str>>(
    candidates: &[S],
    vocab: &AnswerVocab,
    table: &Tensor,
) -> Result<Tensor> {
    let ids: Vec<usize> = candidates.iter().map(|c| vocab.id(c.as_ref())).collect();
    embed_tokens(&ids, table)
}

// ---- binary feature files ------------------------------------------------

pub const FEATURE_MAGIC: &[u8; 4] = b"HOAF";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER: usize = 16;

/// Little-endian: magic, version, n_v, d_feat, then `n_v·d_feat` f32 row-major.
pub fn encode_features(features: &Tensor) -> Result<Vec<u8>> {
    let [n_v, d] = *features.shape() else {
        return dim_err(format!("features must be a matrix, got {:?}", features.shape()));
    };
    let mut out = Vec::with_capacity(FEATURE_HEADER + 4 * features.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(n_v as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for &x in features.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

fn fmt_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset: offset as u64,
        message: message.into(),
    })
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    match bytes.get(at..at + 4) {
        Some(b) => Ok(u32::from_le_bytes(b.try_into().unwrap())),
        None => fmt_err(bytes.len(), format!("truncated header (wanted u32 at byte {at})")),
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return fmt_err(0, "bad magic, expected HOAF");
    }
    let version = read_u32(bytes, 4)?;
    if version != FEATURE_VERSION {
        return fmt_err(4, format!("unsupported version {version}"));
    }
    let n_v = read_u32(bytes, 8)? as usize;
    let d = read_u32(bytes, 12)? as usize;
    if n_v == 0 || d == 0 {
        return fmt_err(8, format!("empty feature grid {n_v}x{d}"));
    }
    let need = FEATURE_HEADER + 4 * n_v * d;
    if bytes.len() < need {
        return fmt_err(bytes.len(), format!("truncated payload: need {need} bytes"));
    }
    if bytes.len() > need {
        return fmt_err(need, "trailing bytes after payload");
    }
    let data = bytes[FEATURE_HEADER..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Tensor::new(vec![n_v, d], data)
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let bytes = encode_features(features)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads an `[n_v × d_feat]` feature grid.
pub fn load_image_features(path: &Path) -> Result<Tensor> {
    decode_features(&fs::read(path)?)
}
