//! Key–value text adapter and its residual fusion with a linear classifier.
//!
//! Keys `F` (`N·K × D`) are text features, one per (class, domain) pair in
//! class-major order; values `L` are the matching one-hot class labels. For a
//! unit feature `f`:
//!
//! ```text
//! adapter(f)  = φ(f Fᵀ) L,          φ(x) = exp(-β (1 - x))
//! logits(f)   = f Wᵀ + α · adapter(f)
//! ```

use crate::encoder::{Prompt, PromptTemplate, TextEncoder};
use crate::error::{Error, Result};
use crate::featio::UNIT_NORM_TOLERANCE;
use crate::numdiff::{dot_raw, Shape, Tape, Tensor, Var, MIN_NORM};
use crate::rng;

/// Paper-default domain bank. Only the first three names are given there;
/// the rest complete a plausible eleven.
pub const DEFAULT_DOMAINS: [&str; 11] = [
    "photo",
    "cartoon",
    "painting",
    "sketch",
    "art",
    "clipart",
    "infograph",
    "quickdraw",
    "product",
    "real-world",
    "drawing",
];

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 2.0;

/// `exp(-β (1 - x))`.
pub fn phi(x: f64, beta: f64) -> f64 {
    (-beta * (1.0 - x)).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextAdapter {
    keys: Tensor,
    domain_names: Vec<String>,
    num_classes: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl TextAdapter {
    pub fn new(keys: Tensor, num_classes: usize, domain_names: Vec<String>, alpha: f64, beta: f64) -> Result<Self> {
        let k = domain_names.len();
        if num_classes == 0 || k == 0 {
            return Err(Error::InvalidArgument("adapter needs at least one class and one domain".into()));
        }
        if keys.shape() != Shape::Matrix(num_classes * k, keys.cols()) || keys.cols() == 0 {
            return Err(Error::shape(
                "adapter keys",
                keys.shape(),
                format!("[{}xD]", num_classes * k),
            ));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::config("beta", format!("must be positive, got {beta}")));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::config("alpha", format!("must be non-negative, got {alpha}")));
        }
        let mut adapter = Self {
            keys,
            domain_names,
            num_classes,
            alpha,
            beta,
        };
        adapter.renormalize_keys()?;
        Ok(adapter)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn domain_names(&self) -> &[String] {
        &self.domain_names
    }

    pub fn keys(&self) -> &Tensor {
        &self.keys
    }

    pub fn keys_mut(&mut self) -> &mut Tensor {
        &mut self.keys
    }

    /// Class of key row `row`.
    pub fn row_class(&self, row: usize) -> usize {
        row / self.num_domains()
    }

    /// The fixed one-hot value matrix `L` (`N·K × N`).
    pub fn label_matrix(&self) -> Tensor {
        let (rows, n) = (self.keys.rows(), self.num_classes);
        let mut data = vec![0.0; rows * n];
        for r in 0..rows {
            data[r * n + self.row_class(r)] = 1.0;
        }
        Tensor::matrix(rows, n, data).expect("finite")
    }

    /// Rescales every key row to unit L2 norm.
    pub fn renormalize_keys(&mut self) -> Result<()> {
        for r in 0..self.keys.rows() {
            let row = self.keys.row_mut(r);
            let norm = dot_raw(row, row).sqrt();
            if norm <= MIN_NORM {
                return Err(Error::ZeroNorm {
                    tensor: format!("adapter key row {r}"),
                    norm,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    weights: Tensor,
}

impl LinearClassifier {
    pub fn new(weights: Tensor) -> Result<Self> {
        match weights.shape() {
            Shape::Matrix(n, d) if n > 0 && d > 0 => Ok(Self { weights }),
            other => Err(Error::shape("classifier weights", other, "[NxD]")),
        }
    }

    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            weights: Tensor::zeros(Shape::Matrix(num_classes, dim)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }
}

/// Keys from "a [DOM] of a [CLS]": row `j·K + k` encodes domain `k`, class `j`.
pub fn init_from_templates(
    encoder: &dyn TextEncoder,
    class_names: &[String],
    domain_names: &[String],
) -> Result<Tensor> {
    if class_names.is_empty() || domain_names.is_empty() {
        return Err(Error::InvalidArgument("class and domain names must be non-empty".into()));
    }
    let template = PromptTemplate::domain_class();
    let mut rows = Vec::with_capacity(class_names.len() * domain_names.len());
    for (j, class) in class_names.iter().enumerate() {
        for (k, domain) in domain_names.iter().enumerate() {
            let row = encoder
                .encode(&template, &Prompt::domain_class(domain, class))
                .map_err(|e| e.context(format!("adapter key (class {j}, domain {k})")))?;
            rows.push(row);
        }
    }
    Tensor::from_rows(&rows)
}

/// Keys drawn elementwise from `N(0, 1)` and normalized per row.
pub fn init_random(num_classes: usize, num_domains: usize, dim: usize, seed: u64) -> Result<Tensor> {
    let mut g = rng::gaussian(rng::derive_seed(seed, &[0xada]));
    let rows = num_classes * num_domains;
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let row: Vec<f64> = (0..dim).map(|_| g.standard()).collect();
        let norm = dot_raw(&row, &row).sqrt();
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::matrix(rows, dim, data)
}

fn check_feature(f: &[f64], dim: usize) -> Result<()> {
    if f.len() != dim {
        return Err(Error::shape("logits", format!("[{}]", f.len()), format!("[{dim}]")));
    }
    let norm = dot_raw(f, f).sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::InvalidArgument(format!("input feature has norm {norm}, expected 1")));
    }
    Ok(())
}

/// `φ(f Fᵀ) L`: entry `n` sums `φ(f · F[n·K + k])` over domains `k`.
pub fn adapter_logits(f: &[f64], adapter: &TextAdapter) -> Result<Vec<f64>> {
    check_feature(f, adapter.dim())?;
    let mut out = vec![0.0; adapter.num_classes()];
    for r in 0..adapter.keys.rows() {
        out[adapter.row_class(r)] += phi(dot_raw(f, adapter.keys.row(r)), adapter.beta);
    }
    Ok(out)
}

/// `f Wᵀ`.
pub fn linear_logits(f: &[f64], classifier: &LinearClassifier) -> Result<Vec<f64>> {
    if f.len() != classifier.dim() {
        return Err(Error::shape("linear logits", format!("[{}]", f.len()), format!("[{}]", classifier.dim())));
    }
    Ok((0..classifier.num_classes())
        .map(|n| dot_raw(f, classifier.weights.row(n)))
        .collect())
}

/// `f Wᵀ + α φ(f Fᵀ) L`. With `α = 0` this is exactly `f Wᵀ`.
pub fn combined_logits(f: &[f64], classifier: &LinearClassifier, adapter: &TextAdapter) -> Result<Vec<f64>> {
    if classifier.num_classes() != adapter.num_classes() || classifier.dim() != adapter.dim() {
        return Err(Error::shape(
            "combined logits",
            classifier.weights.shape(),
            format!("[{}x{}]", adapter.num_classes(), adapter.dim()),
        ));
    }
    let mut logits = linear_logits(f, classifier)?;
    if adapter.alpha == 0.0 {
        check_feature(f, adapter.dim())?;
        return Ok(logits);
    }
    let extra = adapter_logits(f, adapter)?;
    for (l, a) in logits.iter_mut().zip(extra) {
        *l += adapter.alpha * a;
    }
    Ok(logits)
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn predict(f: &[f64], classifier: &LinearClassifier, adapter: &TextAdapter) -> Result<usize> {
    combined_logits(f, classifier, adapter).map(|l| argmax(&l))
}

/// The fused model used at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub classifier: LinearClassifier,
    pub adapter: TextAdapter,
}

impl Model {
    pub fn logits(&self, f: &[f64]) -> Result<Vec<f64>> {
        combined_logits(f, &self.classifier, &self.adapter)
    }

    pub fn predict(&self, f: &[f64]) -> Result<usize> {
        predict(f, &self.classifier, &self.adapter)
    }
}

/// Batched fused logits on a tape: `X Wᵀ + α exp(β X Fᵀ − β) L`.
///
/// `features` is `B × D`, `weights` `N × D`, `keys` `N·K × D` and `labels`
/// the constant `N·K × N` value matrix.
pub fn logits_on_tape(
    tape: &mut Tape,
    features: Var,
    weights: Var,
    keys: Var,
    labels: Var,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let wt = tape.transpose(weights)?;
    let linear = tape.matmul(features, wt)?;
    if alpha == 0.0 {
        return Ok(linear);
    }
    let kt = tape.transpose(keys)?;
    let similarity = tape.matmul(features, kt)?;
    let scaled = tape.scale(similarity, beta)?;
    let shifted = tape.shift(scaled, -beta)?;
    let activated = tape.exp(shifted)?;
    let adapter = tape.matmul(activated, labels)?;
    let weighted = tape.scale(adapter, alpha)?;
    tape.add(linear, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ToyEncoder;
    use crate::numdiff::gradcheck;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = dot_raw(&v, &v).sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_unit(dim: usize, g: &mut crate::rng::BoxMuller<rand_chacha::ChaCha8Rng>) -> Vec<f64> {
        unit((0..dim).map(|_| g.standard()).collect())
    }

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn random_model(n: usize, k: usize, d: usize, seed: u64, alpha: f64) -> Model {
        let mut g = rng::gaussian(seed);
        let w: Vec<f64> = (0..n * d).map(|_| g.standard()).collect();
        Model {
            classifier: LinearClassifier::new(Tensor::matrix(n, d, w).unwrap()).unwrap(),
            adapter: TextAdapter::new(init_random(n, k, d, seed).unwrap(), n, names("d", k), alpha, 2.0).unwrap(),
        }
    }

    #[test]
    fn phi_reference_values() {
        for beta in [0.5, 1.0, 2.0, 5.0] {
            assert_eq!(phi(1.0, beta), 1.0);
        }
        assert!((phi(0.0, 2.0) - (-2f64).exp()).abs() < 1e-12);
        assert!((phi(0.0, 2.0) - 0.135335).abs() < 1e-6);
        assert!((phi(-1.0, 2.0) - 0.018316).abs() < 1e-6);
        assert!(phi(0.3, 2.0) < phi(0.31, 2.0));
    }

    #[test]
    fn identity_keys_hand_example() {
        let keys = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let adapter = TextAdapter::new(keys, 2, names("d", 1), 1.0, 2.0).unwrap();
        let l = adapter_logits(&[1.0, 0.0], &adapter).unwrap();
        assert_eq!(l[0], 1.0);
        assert!((l[1] - (-2f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn label_matrix_is_class_major_one_hot() {
        let adapter = random_model(3, 2, 4, 1, 1.0).adapter;
        let l = adapter.label_matrix();
        for r in 0..6 {
            assert_eq!(l.row(r).iter().sum::<f64>(), 1.0);
            assert_eq!(l.row(r)[r / 2], 1.0);
        }
    }

    #[test]
    fn adapter_logits_match_double_loop() {
        let mut g = rng::gaussian(2);
        for seed in 0..100u64 {
            let (n_cls, k_dom, d) = (2 + seed as usize % 4, 1 + seed as usize % 3, 3 + seed as usize % 6);
            let m = random_model(n_cls, k_dom, d, seed, 1.0);
            let f = random_unit(d, &mut g);
            let got = adapter_logits(&f, &m.adapter).unwrap();
            let keys = m.adapter.keys();
            for (n, &value) in got.iter().enumerate() {
                let mut expected = 0.0;
                for k in 0..k_dom {
                    let row = keys.row(n * k_dom + k);
                    let cos: f64 = (0..d).map(|i| f[i] * row[i]).sum();
                    expected += (-2.0 * (1.0 - cos)).exp();
                }
                assert!((value - expected).abs() <= 1e-12);
                assert!(value > 0.0 && value <= k_dom as f64 + 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = random_model(2, 1, 4, 1, 1.0);
        assert!(adapter_logits(&[1.0, 0.0], &m.adapter).is_err());
        assert!(m.logits(&[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn zero_alpha_is_exactly_linear() {
        let mut g = rng::gaussian(4);
        let m = random_model(4, 3, 6, 5, 0.0);
        let f = random_unit(6, &mut g);
        assert_eq!(m.logits(&f).unwrap(), linear_logits(&f, &m.classifier).unwrap());
    }

    #[test]
    fn zero_weights_give_adapter_logits() {
        let mut g = rng::gaussian(6);
        let mut m = random_model(4, 3, 6, 7, 1.0);
        m.classifier = LinearClassifier::zeros(4, 6);
        let f = random_unit(6, &mut g);
        assert_eq!(m.logits(&f).unwrap(), adapter_logits(&f, &m.adapter).unwrap());
    }

    #[test]
    fn fused_logits_are_the_sum_of_parts() {
        let mut g = rng::gaussian(8);
        let m = random_model(3, 2, 5, 9, 2.5);
        let f = random_unit(5, &mut g);
        let fused = m.logits(&f).unwrap();
        let lin = linear_logits(&f, &m.classifier).unwrap();
        let ad = adapter_logits(&f, &m.adapter).unwrap();
        for n in 0..3 {
            assert!((fused[n] - (lin[n] + 2.5 * ad[n])).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.9, 0.9]), 1);
        let l = [0.4, -1.0, 3.0, 2.9];
        let shifted: Vec<f64> = l.iter().map(|v| v + 17.5).collect();
        assert_eq!(argmax(&l), argmax(&shifted));
    }

    #[test]
    fn template_keys_follow_class_major_order() {
        let enc = ToyEncoder::new(0, 16, 32).unwrap();
        let classes = vec!["dog".to_string(), "house".to_string()];
        let domains = vec!["photo".to_string(), "sketch".to_string()];
        let keys = init_from_templates(&enc, &classes, &domains).unwrap();
        assert_eq!(keys.rows(), 4);
        let t = PromptTemplate::domain_class();
        let mut r = 0;
        for c in &classes {
            for d in &domains {
                let fresh = enc.encode(&t, &Prompt::domain_class(d, c)).unwrap();
                assert_eq!(keys.row(r), &fresh[..]);
                assert!((dot_raw(&fresh, &fresh).sqrt() - 1.0).abs() < 1e-9);
                r += 1;
            }
        }
    }

    #[test]
    fn random_and_template_init_differ_only_in_values() {
        let enc = ToyEncoder::new(0, 16, 32).unwrap();
        let classes = names("c", 3);
        let domains = names("d", 4);
        let t = TextAdapter::new(init_from_templates(&enc, &classes, &domains).unwrap(), 3, domains.clone(), 1.0, 2.0).unwrap();
        let r = TextAdapter::new(init_random(3, 4, 32, 1).unwrap(), 3, domains, 1.0, 2.0).unwrap();
        assert_eq!(t.keys().shape(), r.keys().shape());
        assert_eq!(t.label_matrix(), r.label_matrix());
        assert_ne!(t.keys(), r.keys());
    }

    #[test]
    fn tape_logits_match_direct_evaluation() {
        let mut g = rng::gaussian(10);
        let m = random_model(3, 2, 5, 11, 1.5);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| random_unit(5, &mut g)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&xs).unwrap());
        let w = tape.constant(m.classifier.weights().clone());
        let f = tape.constant(m.adapter.keys().clone());
        let l = tape.constant(m.adapter.label_matrix());
        let out = logits_on_tape(&mut tape, x, w, f, l, 1.5, 2.0).unwrap();
        for (b, xb) in xs.iter().enumerate() {
            let direct = m.logits(xb).unwrap();
            for (t, d) in tape.value(out).row(b).iter().zip(&direct) {
                assert!((t - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_gradients_pass_gradcheck() {
        let mut g = rng::gaussian(12);
        let m = random_model(3, 2, 5, 13, 1.0);
        let xs = Tensor::from_rows(&(0..4).map(|_| random_unit(5, &mut g)).collect::<Vec<_>>()).unwrap();
        let targets = [0, 2, 1, 1];
        let labels = m.adapter.label_matrix();
        let err_w = gradcheck(
            |t, w| {
                let x = t.constant(xs.clone());
                let f = t.constant(m.adapter.keys().clone());
                let l = t.constant(labels.clone());
                let z = logits_on_tape(t, x, w, f, l, 1.0, 2.0)?;
                t.log_softmax_cross_entropy(z, &targets)
            },
            m.classifier.weights(),
            1e-5,
        )
        .unwrap();
        let err_f = gradcheck(
            |t, f| {
                let x = t.constant(xs.clone());
                let w = t.constant(m.classifier.weights().clone());
                let l = t.constant(labels.clone());
                let z = logits_on_tape(t, x, w, f, l, 1.0, 2.0)?;
                t.log_softmax_cross_entropy(z, &targets)
            },
            m.adapter.keys(),
            1e-5,
        )
        .unwrap();
        assert!(err_w <= 1e-4 && err_f <= 1e-4, "{err_w} {err_f}");
    }

    #[test]
    fn raising_one_similarity_never_lowers_its_class() {
        let mut g = rng::gaussian(14);
        let m = random_model(3, 2, 5, 15, 1.0);
        let f = random_unit(5, &mut g);
        let base = adapter_logits(&f, &m.adapter).unwrap();
        // Move key row 3 (class 1) toward f.
        let mut moved = m.adapter.clone();
        let row: Vec<f64> = moved.keys().row(3).iter().zip(&f).map(|(k, x)| k + 0.5 * x).collect();
        moved.keys_mut().row_mut(3).copy_from_slice(&row);
        moved.renormalize_keys().unwrap();
        assert!(dot_raw(&f, moved.keys().row(3)) > dot_raw(&f, m.adapter.keys().row(3)));
        let after = adapter_logits(&f, &moved).unwrap();
        assert!(after[1] >= base[1]);
        assert_eq!(after[0], base[0]);
        assert_eq!(after[2], base[2]);
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        let keys = init_random(2, 1, 3, 0).unwrap();
        assert!(TextAdapter::new(keys.clone(), 2, names("d", 1), 1.0, 0.0).is_err());
        assert!(TextAdapter::new(keys.clone(), 2, names("d", 1), -1.0, 2.0).is_err());
        assert!(TextAdapter::new(keys, 3, names("d", 1), 1.0, 2.0).is_err());
    }
}
