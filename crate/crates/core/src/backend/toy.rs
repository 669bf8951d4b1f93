//! Desk-scale trainable token model.
//!
//! Next-token logits are `bigram[prev, .] + sum_{w in context} input[w, .]`,
//! where the context is the bag of image tokens plus in-vocabulary prompt
//! tokens. Both matrices are `|V| x |V|` and stored row-major. Training is
//! plain gradient descent on a per-token weighted cross-entropy, so the batch
//! loss can encode any per-sequence normalization through the weights.

use std::collections::HashMap;
use std::fs;
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Backend, BackendDescriptor, BackendError, BackendKind, Capability, GenerationRequest,
    ScoredSequence, SequenceKind,
};
use crate::seed::derive_seed;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
/// Half-width of the uniform distribution used for fresh weights.
pub const INIT_SCALE: f64 = 0.01;

const SNAPSHOT_MAGIC: &[u8; 4] = b"TOYM";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// BOS and EOS are always ids 0 and 1; the remaining tokens keep their
    /// given order with duplicates and whitespace-bearing strings dropped.
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        vocab.push(BOS.to_string());
        vocab.push(EOS.to_string());
        for tok in tokens {
            let tok = tok.into();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                continue;
            }
            vocab.push(tok);
        }
        vocab
    }

    fn push(&mut self, tok: String) {
        if !self.index.contains_key(&tok) {
            self.index.insert(tok.clone(), self.tokens.len());
            self.tokens.push(tok);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn bos(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }
}

/// Flat parameter index: `Bigram(prev, next)` or `Input(context, next)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamIndex {
    Bigram(usize, usize),
    Input(usize, usize),
}

/// One teacher-forced sequence: context bag, target ids and per-token loss
/// weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub image: Vec<usize>,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
    pub weights: Vec<f64>,
}

impl TrainExample {
    fn context(&self) -> impl Iterator<Item = usize> + '_ {
        self.image.iter().chain(self.prompt.iter()).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStat {
    pub token: String,
    pub prob: f64,
    /// Entropy (nats) of the full next-token distribution at this position.
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    vocab: Vocab,
    bigram: Vec<f64>,
    input: Vec<f64>,
    seed: u64,
}

fn log_softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|x| (x - max).exp()).sum();
    let log_z = max + sum.ln();
    for x in logits.iter_mut() {
        *x -= log_z;
    }
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in logits.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in logits.iter_mut() {
        *x /= sum;
    }
}

impl ToyModel {
    pub fn new(vocab: Vocab, seed: u64) -> Self {
        let n = vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len)
                .map(|_| rng.random_range(-INIT_SCALE..INIT_SCALE))
                .collect()
        };
        let bigram = draw(n * n);
        let input = draw(n * n);
        Self {
            vocab,
            bigram,
            input,
            seed,
        }
    }

    pub fn zeros(vocab: Vocab) -> Self {
        let n = vocab.len();
        Self {
            vocab,
            bigram: vec![0.0; n * n],
            input: vec![0.0; n * n],
            seed: 0,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn n(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_params(&self) -> usize {
        2 * self.n() * self.n()
    }

    pub fn flat_index(&self, idx: ParamIndex) -> usize {
        let n = self.n();
        match idx {
            ParamIndex::Bigram(r, c) => r * n + c,
            ParamIndex::Input(r, c) => n * n + r * n + c,
        }
    }

    pub fn param(&self, flat: usize) -> f64 {
        let nn = self.n() * self.n();
        if flat < nn {
            self.bigram[flat]
        } else {
            self.input[flat - nn]
        }
    }

    pub fn set_param(&mut self, flat: usize, value: f64) {
        let nn = self.n() * self.n();
        if flat < nn {
            self.bigram[flat] = value;
        } else {
            self.input[flat - nn] = value;
        }
    }

    fn logits_into(&self, prev: usize, context: impl Iterator<Item = usize>, out: &mut [f64]) {
        let n = self.n();
        out.copy_from_slice(&self.bigram[prev * n..(prev + 1) * n]);
        for w in context {
            for (o, v) in out.iter_mut().zip(&self.input[w * n..(w + 1) * n]) {
                *o += v;
            }
        }
    }

    pub fn logits(&self, prev: usize, context: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        self.logits_into(prev, context.iter().copied(), &mut out);
        out
    }

    pub fn distribution(&self, prev: usize, context: &[usize]) -> Vec<f64> {
        let mut out = self.logits(prev, context);
        softmax_in_place(&mut out);
        out
    }

    /// Teacher-forced log-probabilities of `target` given `context`.
    pub fn score_ids(&self, context: &[usize], target: &[usize]) -> Vec<f64> {
        let mut buf = vec![0.0; self.n()];
        let mut prev = self.vocab.bos();
        target
            .iter()
            .map(|&tok| {
                self.logits_into(prev, context.iter().copied(), &mut buf);
                log_softmax_in_place(&mut buf);
                prev = tok;
                buf[tok]
            })
            .collect()
    }

    pub fn encode_strict(&self, tokens: &[String]) -> Result<Vec<usize>, BackendError> {
        tokens
            .iter()
            .map(|t| {
                self.vocab
                    .id(t)
                    .ok_or_else(|| BackendError::TokenNotInVocab(t.clone()))
            })
            .collect()
    }

    /// Conditioning tokens from free text. Words outside the vocabulary are
    /// dropped; a word with surrounding punctuation is tried bare as well.
    pub fn encode_context(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .filter_map(|w| {
                self.vocab.id(w).or_else(|| {
                    self.vocab
                        .id(w.trim_matches(|c: char| c.is_ascii_punctuation()))
                })
            })
            .collect()
    }

    fn check_example(&self, ex: &TrainExample) -> Result<(), BackendError> {
        let n = self.n();
        if let Some(bad) = ex
            .context()
            .chain(ex.target.iter().copied())
            .find(|&t| t >= n)
        {
            return Err(BackendError::TokenNotInVocab(format!("#{bad}")));
        }
        if ex.target.len() != ex.weights.len() {
            return Err(BackendError::InvalidRequest(format!(
                "{} target tokens but {} weights",
                ex.target.len(),
                ex.weights.len()
            )));
        }
        if ex.weights.iter().any(|w| !w.is_finite()) {
            return Err(BackendError::InvalidRequest(
                "non-finite loss weight".into(),
            ));
        }
        Ok(())
    }

    /// Weighted cross-entropy `sum_examples sum_t w_t * -log p(target_t)`.
    pub fn loss(&self, batch: &[TrainExample]) -> f64 {
        batch
            .iter()
            .map(|ex| {
                let context: Vec<usize> = ex.context().collect();
                self.score_ids(&context, &ex.target)
                    .iter()
                    .zip(&ex.weights)
                    .map(|(lp, w)| -w * lp)
                    .sum::<f64>()
            })
            .sum()
    }

    /// Loss and its analytic gradient, flattened as `[bigram.., input..]`.
    pub fn loss_and_gradient(&self, batch: &[TrainExample]) -> (f64, Vec<f64>) {
        let n = self.n();
        let nn = n * n;
        let mut grad = vec![0.0; 2 * nn];
        let mut loss = 0.0;
        let mut probs = vec![0.0; n];
        for ex in batch {
            let mut prev = self.vocab.bos();
            for (&tok, &w) in ex.target.iter().zip(&ex.weights) {
                self.logits_into(prev, ex.context(), &mut probs);
                log_softmax_in_place(&mut probs);
                loss -= w * probs[tok];
                if w != 0.0 {
                    // d(-w log p_y)/d logits = w * (p - onehot(y))
                    for p in probs.iter_mut() {
                        *p = w * p.exp();
                    }
                    probs[tok] -= w;
                    let row = &mut grad[prev * n..(prev + 1) * n];
                    for (g, d) in row.iter_mut().zip(&probs) {
                        *g += d;
                    }
                    for c in ex.context() {
                        let row = &mut grad[nn + c * n..nn + (c + 1) * n];
                        for (g, d) in row.iter_mut().zip(&probs) {
                            *g += d;
                        }
                    }
                }
                prev = tok;
            }
        }
        (loss, grad)
    }

    /// One full-batch gradient-descent step. Returns the pre-step loss.
    pub fn fine_tune_step(
        &mut self,
        batch: &[TrainExample],
        learning_rate: f64,
    ) -> Result<f64, BackendError> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(BackendError::InvalidRequest(format!(
                "learning rate must be finite and >= 0, got {learning_rate}"
            )));
        }
        for ex in batch {
            self.check_example(ex)?;
        }
        let (loss, grad) = self.loss_and_gradient(batch);
        if learning_rate > 0.0 {
            let nn = self.n() * self.n();
            for (p, g) in self.bigram.iter_mut().zip(&grad[..nn]) {
                *p -= learning_rate * g;
            }
            for (p, g) in self.input.iter_mut().zip(&grad[nn..]) {
                *p -= learning_rate * g;
            }
        }
        Ok(loss)
    }

    /// Autoregressive decode from BOS. Temperature 0 is greedy (ties go to
    /// the lowest id); BOS is never emitted; EOS stops decoding and is not
    /// included in the output.
    pub fn decode<R: Rng>(
        &self,
        context: &[usize],
        max_tokens: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Vec<usize> {
        let mut out = Vec::new();
        let mut buf = vec![0.0; self.n()];
        let mut prev = self.vocab.bos();
        for _ in 0..max_tokens {
            self.logits_into(prev, context.iter().copied(), &mut buf);
            buf[self.vocab.bos()] = f64::NEG_INFINITY;
            let next = if temperature == 0.0 {
                let mut best = 0;
                for (i, &x) in buf.iter().enumerate() {
                    if x > buf[best] {
                        best = i;
                    }
                }
                best
            } else {
                for x in buf.iter_mut() {
                    *x /= temperature;
                }
                softmax_in_place(&mut buf);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = self.n() - 1;
                for (i, &p) in buf.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            };
            if next == self.vocab.eos() {
                break;
            }
            out.push(next);
            prev = next;
        }
        out
    }

    pub fn snapshot(&self) -> Vec<u8> {
        let n = self.n();
        let mut out = Vec::with_capacity(24 + 16 * n * n);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for tok in &self.vocab.tokens {
            out.extend_from_slice(&(tok.len() as u32).to_le_bytes());
            out.extend_from_slice(tok.as_bytes());
        }
        for x in self.bigram.iter().chain(&self.input) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn restore(bytes: &[u8]) -> Result<Self, BackendError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != SNAPSHOT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let tok =
                std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("token is not utf-8"))?;
            tokens.push(tok.to_string());
        }
        if tokens.len() < 2 || tokens[0] != BOS || tokens[1] != EOS {
            return Err(corrupt("vocabulary must start with BOS, EOS"));
        }
        let vocab = Vocab::new(tokens[2..].iter().cloned());
        if vocab.tokens != tokens {
            return Err(corrupt("vocabulary has duplicate or invalid tokens"));
        }
        let mut matrix =
            || -> Result<Vec<f64>, BackendError> { (0..n * n).map(|_| r.f64()).collect() };
        let bigram = matrix()?;
        let input = matrix()?;
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        if bigram.iter().chain(&input).any(|x| !x.is_finite()) {
            return Err(corrupt("non-finite weight"));
        }
        Ok(Self {
            vocab,
            bigram,
            input,
            seed,
        })
    }
}

fn corrupt(msg: &str) -> BackendError {
    BackendError::CorruptSnapshot(msg.to_string())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], BackendError> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt("truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, BackendError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, BackendError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, BackendError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Resolves toy "images": `tokens:<whitespace tokens>` inline, otherwise a
/// text file of whitespace-separated feature tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct ImageStore;

impl ImageStore {
    pub const INLINE_PREFIX: &'static str = "tokens:";

    pub fn tokens(image_ref: &str) -> Result<Vec<String>, BackendError> {
        let text = match image_ref.strip_prefix(Self::INLINE_PREFIX) {
            Some(inline) => inline.to_string(),
            None => fs::read_to_string(image_ref).map_err(|e| BackendError::ImageUnavailable {
                image_ref: image_ref.to_string(),
                message: e.to_string(),
            })?,
        };
        Ok(text.split_whitespace().map(str::to_string).collect())
    }
}

/// The toy model behind the backend contract. Mutation goes through
/// `&mut self`, so a training step excludes concurrent readers.
#[derive(Debug)]
pub struct ToyBackend {
    model: ToyModel,
    images: RwLock<HashMap<String, Arc<Vec<usize>>>>,
}

impl ToyBackend {
    pub fn new(model: ToyModel) -> Self {
        Self {
            model,
            images: RwLock::new(HashMap::new()),
        }
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    /// Replaces the weights. The vocabulary must match, since cached image
    /// bags are vocabulary ids.
    pub fn set_model(&mut self, model: ToyModel) {
        if model.vocab != self.model.vocab {
            self.images.write().expect("image cache lock").clear();
        }
        self.model = model;
    }

    pub fn into_model(self) -> ToyModel {
        self.model
    }

    /// Image tokens outside the vocabulary are dropped.
    pub fn image_bag(&self, image_ref: &str) -> Result<Arc<Vec<usize>>, BackendError> {
        if let Some(bag) = self.images.read().expect("image cache lock").get(image_ref) {
            return Ok(bag.clone());
        }
        let ids: Vec<usize> = ImageStore::tokens(image_ref)?
            .iter()
            .filter_map(|t| self.model.vocab.id(t))
            .collect();
        let bag = Arc::new(ids);
        self.images
            .write()
            .expect("image cache lock")
            .insert(image_ref.to_string(), bag.clone());
        Ok(bag)
    }

    pub fn context(&self, image_ref: &str, prompt: &str) -> Result<Vec<usize>, BackendError> {
        let mut ctx = self.image_bag(image_ref)?.as_ref().clone();
        ctx.extend(self.model.encode_context(prompt));
        Ok(ctx)
    }

    /// Training example for `target` with EOS appended, so the model learns
    /// where to stop. `weight` applies to every token.
    pub fn example(
        &self,
        image_ref: &str,
        prompt: &str,
        target: &[String],
        weight: f64,
    ) -> Result<TrainExample, BackendError> {
        let mut ids = self.model.encode_strict(target)?;
        ids.push(self.model.vocab.eos());
        Ok(TrainExample {
            image: self.image_bag(image_ref)?.as_ref().clone(),
            prompt: self.model.encode_context(prompt),
            weights: vec![weight; ids.len()],
            target: ids,
        })
    }

    pub fn fine_tune_step(
        &mut self,
        batch: &[TrainExample],
        learning_rate: f64,
    ) -> Result<f64, BackendError> {
        self.model.fine_tune_step(batch, learning_rate)
    }

    /// Teacher-forced probability and full-distribution entropy per target
    /// token.
    pub fn position_stats(
        &self,
        image_ref: &str,
        prompt: &str,
        target: &[String],
    ) -> Result<Vec<TokenStat>, BackendError> {
        let ctx = self.context(image_ref, prompt)?;
        let ids = self.model.encode_strict(target)?;
        let mut prev = self.model.vocab.bos();
        Ok(ids
            .iter()
            .map(|&tok| {
                let dist = self.model.distribution(prev, &ctx);
                prev = tok;
                let entropy = -dist
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|p| p * p.ln())
                    .sum::<f64>();
                TokenStat {
                    token: self.model.vocab.token(tok).to_string(),
                    prob: dist[tok],
                    entropy: entropy.max(0.0),
                }
            })
            .collect())
    }

    fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.model.vocab.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Backend for ToyBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: BackendKind::Toy,
            endpoint: None,
            model_name: "toy-bigram".into(),
            capabilities: [
                Capability::Generate,
                Capability::Score,
                Capability::Finetune,
            ]
            .into_iter()
            .collect(),
        }
    }

    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, BackendError> {
        request.validate()?;
        let ctx = self.context(&request.image_ref, &request.prompt)?;
        (0..request.num_candidates)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(request.seed, &[&i]));
                let ids =
                    self.model
                        .decode(&ctx, request.max_tokens, request.temperature, &mut rng);
                Ok(self.render(&ids))
            })
            .collect()
    }

    fn score(
        &self,
        image_ref: &str,
        prompt: &str,
        target: &[String],
    ) -> Result<ScoredSequence, BackendError> {
        let ctx = self.context(image_ref, prompt)?;
        let ids = self.model.encode_strict(target)?;
        let logprobs = self.model.score_ids(&ctx, &ids);
        let kind = if target.len() > 2 && target.first().is_some_and(|t| t == "<SUMMARY>") {
            SequenceKind::ChainTokens
        } else {
            SequenceKind::LabelTokens
        };
        ScoredSequence::new(target.to_vec(), logprobs, kind).map_err(BackendError::InvalidRequest)
    }
}
