//! Residual make-model classifier.
//!
//! A stride-2 stem is followed by stages of one convolutional block and one
//! identity block each, then global average pooling and a softmax head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vmmc_core::loss::softmax;
use vmmc_core::{ClassScores, NUM_CLASSES};

use crate::layers::{global_avg_pool, global_avg_pool_backward, relu, relu_backward, ConvBn, Linear};
use crate::param::{join, Module, Param};
use crate::tensor::Tensor;
use crate::NnError;

/// Filter plan of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    /// Filters of the first two sections.
    pub bottleneck: usize,
    /// Filters of the third section and of the shortcut.
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub input_size: usize,
    pub input_channels: usize,
    pub stem_filters: usize,
    pub stages: Vec<StagePlan>,
    pub classes: usize,
}

impl Default for ClassifierSpec {
    /// The reference 300×300 network: 30 weight layers, 1,132,775
    /// trainable parameters.
    fn default() -> Self {
        Self {
            input_size: 300,
            input_channels: 3,
            stem_filters: 16,
            stages: vec![
                StagePlan { bottleneck: 16, output: 64 },
                StagePlan { bottleneck: 32, output: 128 },
                StagePlan { bottleneck: 64, output: 512 },
                StagePlan { bottleneck: 128, output: 512 },
            ],
            classes: NUM_CLASSES,
        }
    }
}

impl ClassifierSpec {
    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Spec(m.to_string()));
        if self.input_size == 0 || self.input_channels == 0 || self.stem_filters == 0 {
            return bad("input size, channels and stem filters must be positive");
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required");
        }
        if self.stages.iter().any(|s| s.bottleneck == 0 || s.output == 0) {
            return bad("stage filter counts must be positive");
        }
        if self.classes < 2 {
            return bad("at least two classes are required");
        }
        Ok(())
    }

    /// Convolution and dense layers carrying weights.
    pub fn weight_layers(&self) -> usize {
        1 + 7 * self.stages.len() + 1
    }

    /// Closed-form trainable parameter count: conv kernels and biases,
    /// batch-norm scale and shift, dense weights and biases.
    pub fn trainable_parameters(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| i * o * k * k + o + 2 * o;
        let mut n = conv(self.input_channels, self.stem_filters, 3);
        let mut c = self.stem_filters;
        for s in &self.stages {
            let (a, b) = (s.bottleneck, s.output);
            n += conv(c, a, 1) + conv(a, a, 3) + conv(a, b, 1) + conv(c, b, 1);
            n += conv(b, a, 1) + conv(a, a, 3) + conv(a, b, 1);
            c = b;
        }
        n + c * self.classes + self.classes
    }
}

/// `y = relu(F(x) + x)` with `F` three sections of stride 1.
#[derive(Debug, Clone)]
pub struct IdentityBlock {
    pub a: ConvBn,
    pub b: ConvBn,
    pub c: ConvBn,
    output: Option<Tensor>,
}

impl IdentityBlock {
    pub fn new(channels: usize, bottleneck: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: ConvBn::new(channels, bottleneck, 1, 1, true, rng),
            b: ConvBn::new(bottleneck, bottleneck, 3, 1, true, rng),
            c: ConvBn::new(bottleneck, channels, 1, 1, false, rng),
            output: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.a.conv.in_channels
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut y = self.c.infer(&self.b.infer(&self.a.infer(x)?)?)?;
        y.add_assign(x);
        relu(&mut y);
        Ok(y)
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor, NnError> {
        let h = self.a.forward(x, train)?;
        let h = self.b.forward(&h, train)?;
        let mut y = self.c.forward(&h, train)?;
        y.add_assign(x);
        relu(&mut y);
        self.output = train.then(|| y.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut g = dy.clone();
        relu_backward(&mut g, &self.output.take().expect("identity block backward without forward"));
        let mut dx = self.a.backward(&self.b.backward(&self.c.backward(&g)));
        dx.add_assign(&g);
        dx
    }
}

impl Module for IdentityBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.a.visit(&join(prefix, "a"), f);
        self.b.visit(&join(prefix, "b"), f);
        self.c.visit(&join(prefix, "c"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.a.visit_mut(&join(prefix, "a"), f);
        self.b.visit_mut(&join(prefix, "b"), f);
        self.c.visit_mut(&join(prefix, "c"), f);
    }
}

/// `y = relu(F(x) + W_s x)`; the first section and the shortcut have
/// stride 2.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub a: ConvBn,
    pub b: ConvBn,
    pub c: ConvBn,
    pub shortcut: ConvBn,
    output: Option<Tensor>,
}

impl ConvBlock {
    pub fn new(in_channels: usize, plan: StagePlan, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: ConvBn::new(in_channels, plan.bottleneck, 1, 2, true, rng),
            b: ConvBn::new(plan.bottleneck, plan.bottleneck, 3, 1, true, rng),
            c: ConvBn::new(plan.bottleneck, plan.output, 1, 1, false, rng),
            shortcut: ConvBn::new(in_channels, plan.output, 1, 2, false, rng),
            output: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut y = self.c.infer(&self.b.infer(&self.a.infer(x)?)?)?;
        y.add_assign(&self.shortcut.infer(x)?);
        relu(&mut y);
        Ok(y)
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor, NnError> {
        let h = self.a.forward(x, train)?;
        let h = self.b.forward(&h, train)?;
        let mut y = self.c.forward(&h, train)?;
        y.add_assign(&self.shortcut.forward(x, train)?);
        relu(&mut y);
        self.output = train.then(|| y.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut g = dy.clone();
        relu_backward(&mut g, &self.output.take().expect("conv block backward without forward"));
        let mut dx = self.a.backward(&self.b.backward(&self.c.backward(&g)));
        dx.add_assign(&self.shortcut.backward(&g));
        dx
    }
}

impl Module for ConvBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.a.visit(&join(prefix, "a"), f);
        self.b.visit(&join(prefix, "b"), f);
        self.c.visit(&join(prefix, "c"), f);
        self.shortcut.visit(&join(prefix, "shortcut"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.a.visit_mut(&join(prefix, "a"), f);
        self.b.visit_mut(&join(prefix, "b"), f);
        self.c.visit_mut(&join(prefix, "c"), f);
        self.shortcut.visit_mut(&join(prefix, "shortcut"), f);
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub conv: ConvBlock,
    pub identity: IdentityBlock,
}

#[derive(Debug, Clone)]
pub struct ClassifierNetwork {
    spec: ClassifierSpec,
    pub stem: ConvBn,
    pub stages: Vec<Stage>,
    pub head: Linear,
    pooled_from: Option<[usize; 4]>,
}

/// Builds a freshly initialized network from `spec`.
pub fn build_network(spec: &ClassifierSpec, seed: u64) -> Result<ClassifierNetwork, NnError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem = ConvBn::new(spec.input_channels, spec.stem_filters, 3, 2, true, &mut rng);
    let mut c = spec.stem_filters;
    let mut stages = Vec::with_capacity(spec.stages.len());
    for plan in &spec.stages {
        stages.push(Stage { conv: ConvBlock::new(c, *plan, &mut rng), identity: IdentityBlock::new(plan.output, plan.bottleneck, &mut rng) });
        c = plan.output;
    }
    let head = Linear::new(c, spec.classes, &mut rng);
    Ok(ClassifierNetwork { spec: spec.clone(), stem, stages, head, pooled_from: None })
}

impl ClassifierNetwork {
    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NnError> {
        let s = self.spec.input_size;
        let [n, c, h, w] = x.shape();
        if n == 0 || c != self.spec.input_channels || h != s || w != s {
            return Err(NnError::Shape(format!("expected N×{}×{s}×{s}, got {:?}", self.spec.input_channels, x.shape())));
        }
        Ok(())
    }

    /// Pre-softmax outputs, `N × classes`, without touching any cache.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(x)?;
        let mut h = self.stem.infer(x)?;
        for s in &self.stages {
            h = s.identity.infer(&s.conv.infer(&h)?)?;
        }
        self.head.infer(&global_avg_pool(&h))
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor, NnError> {
        self.check_input(x)?;
        let mut h = self.stem.forward(x, train)?;
        for s in &mut self.stages {
            h = s.conv.forward(&h, train)?;
            h = s.identity.forward(&h, train)?;
        }
        self.pooled_from = Some(h.shape());
        self.head.forward(&global_avg_pool(&h), train)
    }

    /// Backpropagates `d loss / d logits`, accumulating parameter gradients,
    /// and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, dlogits: &Tensor) -> Tensor {
        let shape = self.pooled_from.take().expect("backward without forward");
        let mut g = global_avg_pool_backward(&self.head.backward(dlogits), shape);
        for s in self.stages.iter_mut().rev() {
            g = s.identity.backward(&g);
            g = s.conv.backward(&g);
        }
        self.stem.backward(&g)
    }

    /// Softmax probabilities per batch item.
    pub fn probabilities(&self, x: &Tensor) -> Result<Vec<Vec<f64>>, NnError> {
        let logits = self.logits(x)?;
        Ok(logits.data().chunks(self.spec.classes).map(|row| softmax(&row.iter().map(|&v| v as f64).collect::<Vec<_>>())).collect())
    }

    /// Class scores of a single preprocessed `C×S×S` image.
    pub fn predict(&self, image: &[f32]) -> Result<ClassScores, NnError> {
        if self.spec.classes != NUM_CLASSES {
            return Err(NnError::Spec(format!("predict needs a {NUM_CLASSES}-class head, this one has {}", self.spec.classes)));
        }
        let s = self.spec.input_size;
        let x = Tensor::from_vec([1, self.spec.input_channels, s, s], image.to_vec())?;
        let logits = self.logits(&x)?;
        let row: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
        ClassScores::from_logits(&row).map_err(|e| NnError::Numeric(e.to_string()))
    }
}

impl Module for ClassifierNetwork {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.conv.visit(&join(prefix, &format!("stage{i}.conv")), f);
            s.identity.visit(&join(prefix, &format!("stage{i}.identity")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.conv.visit_mut(&join(prefix, &format!("stage{i}.conv")), f);
            s.identity.visit_mut(&join(prefix, &format!("stage{i}.identity")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::tests::{check_input_grad, random_tensor};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn zero_section(s: &mut ConvBn) {
        s.conv.weight.value.fill(0.0);
        s.conv.bias.value.fill(0.0);
        s.bn.gamma.value.fill(0.0);
        s.bn.beta.value.fill(0.0);
    }

    #[test]
    fn reference_plan_counts() {
        let spec = ClassifierSpec::default();
        assert_eq!(spec.weight_layers(), 30);
        assert_eq!(spec.trainable_parameters(), 1_132_775);
        let net = build_network(&spec, 0).unwrap();
        assert_eq!(net.trainable_parameter_count(), 1_132_775);
    }

    #[test]
    fn identity_block_preserves_shape() {
        let mut r = rng();
        let block = IdentityBlock::new(64, 16, &mut r);
        let x = random_tensor([1, 64, 38, 38], &mut r);
        assert_eq!(block.infer(&x).unwrap().shape(), [1, 64, 38, 38]);
        assert!(block.infer(&Tensor::zeros([1, 32, 4, 4])).is_err());
    }

    #[test]
    fn zero_residual_passes_non_negative_input() {
        let mut r = rng();
        let mut block = IdentityBlock::new(8, 4, &mut r);
        zero_section(&mut block.c);
        let mut x = random_tensor([2, 8, 5, 5], &mut r);
        x.map_inplace(f32::abs);
        assert_eq!(block.infer(&x).unwrap(), x);
    }

    #[test]
    fn identity_block_single_filter_by_hand() {
        let mut r = rng();
        let mut block = IdentityBlock::new(1, 1, &mut r);
        // a: 2x+1, b: centre tap only 3x, c: -x-0.5; inference batch norm
        // divides by sqrt(1 + eps)
        block.a.conv.weight.value = vec![2.0];
        block.a.conv.bias.value = vec![1.0];
        block.b.conv.weight.value = vec![0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0];
        block.b.conv.bias.value = vec![0.0];
        block.c.conv.weight.value = vec![-1.0];
        block.c.conv.bias.value = vec![-0.5];
        let x = Tensor::from_vec([1, 1, 1, 1], vec![0.75]).unwrap();
        let k = 1.0 / (1.0f64 + 1e-3).sqrt();
        let a = ((2.0 * 0.75 + 1.0) * k).max(0.0);
        let b = (3.0 * a * k).max(0.0);
        let c = (-b - 0.5) * k;
        let want = (c + 0.75).max(0.0);
        let got = block.infer(&x).unwrap().data()[0] as f64;
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        assert_eq!(want, 0.0);
        block.c.conv.weight.value = vec![0.1];
        let c = (0.1 * b - 0.5) * k;
        let got = block.infer(&x).unwrap().data()[0] as f64;
        assert!((got - (c + 0.75).max(0.0)).abs() < 1e-6);
    }

    #[test]
    fn conv_block_halves_and_projects() {
        let mut r = rng();
        let block = ConvBlock::new(3, StagePlan { bottleneck: 4, output: 16 }, &mut r);
        let x = random_tensor([1, 3, 300, 300], &mut r);
        assert_eq!(block.infer(&x).unwrap().shape(), [1, 16, 150, 150]);
        let odd = random_tensor([1, 3, 7, 5], &mut r);
        assert_eq!(block.infer(&odd).unwrap().shape(), [1, 16, 4, 3]);
    }

    #[test]
    fn zeroed_main_branch_leaves_the_shortcut() {
        let mut r = rng();
        let mut block = ConvBlock::new(3, StagePlan { bottleneck: 4, output: 6 }, &mut r);
        zero_section(&mut block.c);
        let x = random_tensor([2, 3, 6, 6], &mut r);
        let mut want = block.shortcut.infer(&x).unwrap();
        relu(&mut want);
        assert_eq!(block.infer(&x).unwrap(), want);
    }

    #[test]
    fn conv_block_two_by_two_by_hand() {
        let mut r = rng();
        let mut block = ConvBlock::new(1, StagePlan { bottleneck: 1, output: 1 }, &mut r);
        for s in [&mut block.a, &mut block.c, &mut block.shortcut] {
            s.conv.weight.value = vec![1.0];
            s.conv.bias.value = vec![0.0];
        }
        block.b.conv.weight.value = vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        block.b.conv.bias.value = vec![0.0];
        // stride 2 keeps only the top-left pixel of the 2×2 input
        let x = Tensor::from_vec([1, 1, 2, 2], vec![2.0, 9.0, 9.0, 9.0]).unwrap();
        let k = 1.0 / (1.0f64 + 1e-3).sqrt();
        let main = 2.0 * k * k * k;
        let want = main + 2.0 * k;
        let y = block.infer(&x).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert!((y.data()[0] as f64 - want).abs() < 1e-6);
    }

    fn tiny_spec() -> ClassifierSpec {
        ClassifierSpec {
            input_size: 8,
            input_channels: 3,
            stem_filters: 4,
            stages: vec![StagePlan { bottleneck: 2, output: 6 }, StagePlan { bottleneck: 3, output: 5 }],
            classes: 7,
        }
    }

    #[test]
    fn batch_output_shape_and_softmax_rows() {
        let spec = ClassifierSpec::default().with_input_size(64);
        let net = build_network(&spec, 1).unwrap();
        let mut r = rng();
        let x = random_tensor([32, 3, 64, 64], &mut r);
        let logits = net.logits(&x).unwrap();
        assert_eq!((logits.batch(), logits.item_len()), (32, 7));
        for row in net.probabilities(&x).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn full_size_input_is_accepted() {
        let net = build_network(&ClassifierSpec::default(), 2).unwrap();
        let mut r = rng();
        let x = random_tensor([1, 3, 300, 300], &mut r);
        let scores = net.predict(x.data()).unwrap();
        assert!((scores.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-5);
        assert!(net.predict(&x.data()[..100]).is_err());
    }

    #[test]
    fn zeroed_head_is_uniform() {
        let mut net = build_network(&tiny_spec(), 4).unwrap();
        net.head.weight.value.fill(0.0);
        let mut r = rng();
        let x = random_tensor([1, 3, 8, 8], &mut r);
        for p in net.predict(x.data()).unwrap().probabilities() {
            assert!((p - 1.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_ignores_a_shared_logit_offset() {
        let mut net = build_network(&tiny_spec(), 5).unwrap();
        let mut r = rng();
        let x = random_tensor([1, 3, 8, 8], &mut r);
        let before = net.predict(x.data()).unwrap();
        net.head.bias.value.iter_mut().for_each(|b| *b += 3.5);
        let after = net.predict(x.data()).unwrap();
        assert_eq!(before.top().0, after.top().0);
        for (a, b) in before.probabilities().iter().zip(after.probabilities()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn network_input_gradient_matches_differences() {
        let mut net = build_network(&tiny_spec(), 6).unwrap();
        let mut r = rng();
        let x = random_tensor([3, 3, 8, 8], &mut r);
        let y = net.forward(&x, true).unwrap();
        let g = random_tensor(y.shape(), &mut r);
        let frozen = net.clone();
        let dx = net.backward(&g);
        check_input_grad(&x, &g, &dx, |t| frozen.clone().forward(t, true).unwrap(), 5e-2);
    }

    #[test]
    fn rejects_inconsistent_plans() {
        let mut spec = tiny_spec();
        spec.stages[1].bottleneck = 0;
        assert!(build_network(&spec, 0).is_err());
        spec.stages.clear();
        assert!(build_network(&spec, 0).is_err());
    }
}
