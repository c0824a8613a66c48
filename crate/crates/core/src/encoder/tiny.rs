//! Small seeded convolutional encoder used as a desk-scale stand-in for the
//! pretrained towers. Three 3x3 conv stages with GELU and 2x2 average pooling,
//! global average pooling and a linear head.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{self, Activation};
use super::params::{Grads, ParamId, ParamStore, Tensor};
use crate::preprocess::NormalizedImage;

pub const TINY_INPUT_SIDE: usize = 32;
pub const TINY_EMBEDDING_DIM: usize = 32;
const CHANNELS: [usize; 4] = [3, 8, 16, 32];
const ACT: Activation = Activation::Gelu;

#[derive(Debug, Clone, PartialEq)]
pub struct TinyCnn {
    side: usize,
    conv_w: [ParamId; 3],
    conv_b: [ParamId; 3],
    fc_w: ParamId,
    fc_b: ParamId,
}

struct Stage {
    cols: Array2<f64>,
    pre: Array2<f64>,
}

struct Cache {
    stages: Vec<Stage>,
    pooled: Array1<f64>,
}

impl TinyCnn {
    pub fn layer_tags() -> Vec<String> {
        vec!["conv1".into(), "conv2".into(), "conv3".into()]
    }

    /// Builds the parameter store with He-normal conv weights and zero biases.
    pub fn init(seed: u64) -> (Self, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut conv_w = [0; 3];
        let mut conv_b = [0; 3];
        for i in 0..3 {
            let (cin, cout) = (CHANNELS[i], CHANNELS[i + 1]);
            let fan_in = 9 * cin;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            let w: Vec<f64> = (0..cout * fan_in).map(|_| normal.sample(&mut rng)).collect();
            conv_w[i] = store.add(format!("conv{}.weight", i + 1), Tensor::new(vec![cout, fan_in], w));
            conv_b[i] = store.add(format!("conv{}.bias", i + 1), Tensor::zeros(vec![cout]));
        }
        let d = TINY_EMBEDDING_DIM;
        let c = CHANNELS[3];
        let normal = Normal::new(0.0, (1.0 / c as f64).sqrt()).unwrap();
        let w: Vec<f64> = (0..d * c).map(|_| normal.sample(&mut rng)).collect();
        let fc_w = store.add("fc.weight", Tensor::new(vec![d, c], w));
        let fc_b = store.add("fc.bias", Tensor::zeros(vec![d]));
        (
            Self {
                side: TINY_INPUT_SIDE,
                conv_w,
                conv_b,
                fc_w,
                fc_b,
            },
            store,
        )
    }

    /// Re-binds parameter ids from a store with the expected names.
    pub fn bind(store: &ParamStore) -> Option<Self> {
        let id = |n: &str| store.id(n);
        Some(Self {
            side: TINY_INPUT_SIDE,
            conv_w: [id("conv1.weight")?, id("conv2.weight")?, id("conv3.weight")?],
            conv_b: [id("conv1.bias")?, id("conv2.bias")?, id("conv3.bias")?],
            fc_w: id("fc.weight")?,
            fc_b: id("fc.bias")?,
        })
    }

    pub fn input_side(&self) -> usize {
        self.side
    }

    fn input(x: &NormalizedImage) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((x.height * x.width, 3), &x.data).expect("HWC input")
    }

    /// Runs the conv stages, returning per-stage activations (post-GELU,
    /// pre-pool) when `keep` is set.
    fn run(&self, p: &ParamStore, x: &NormalizedImage, keep_cache: bool) -> (Array1<f64>, Option<Cache>, Vec<Array2<f64>>) {
        let mut h = self.side;
        let mut cur = Self::input(x).to_owned();
        let mut stages = Vec::new();
        let mut taps = Vec::new();
        for i in 0..3 {
            let cols = ops::im2col3x3(cur.view(), h, h);
            let pre = ops::linear(cols.view(), p.mat(self.conv_w[i]), Some(p.vec(self.conv_b[i])));
            let act = pre.mapv(|v| ACT.apply(v));
            cur = if i < 2 { ops::avg_pool2(act.view(), h, h) } else { act.clone() };
            taps.push(act);
            if keep_cache {
                stages.push(Stage { cols, pre });
            }
            if i < 2 {
                h /= 2;
            }
        }
        let pooled = cur.mean_axis(Axis(0)).expect("non-empty map");
        let cache = keep_cache.then(|| Cache {
            stages,
            pooled: pooled.clone(),
        });
        (pooled, cache, taps)
    }

    fn head(&self, p: &ParamStore, pooled: &Array1<f64>) -> Vec<f64> {
        let w = p.mat(self.fc_w);
        (w.dot(pooled) + p.vec(self.fc_b)).to_vec()
    }

    pub fn forward(&self, p: &ParamStore, x: &NormalizedImage) -> Vec<f64> {
        let (pooled, _, _) = self.run(p, x, false);
        self.head(p, &pooled)
    }

    pub fn backward(&self, p: &ParamStore, x: &NormalizedImage, d_out: &[f64], g: &mut Grads) {
        let (_, cache, _) = self.run(p, x, true);
        let cache = cache.expect("cache requested");
        let de = Array1::from(d_out.to_vec());
        let w = p.mat(self.fc_w);
        g.accumulate(
            self.fc_w,
            de.iter()
                .flat_map(|a| cache.pooled.iter().map(move |b| a * b))
                .collect::<Vec<_>>(),
        );
        g.accumulate(self.fc_b, de.iter().copied());
        let d_pooled = de.dot(&w);

        let sides = [self.side, self.side / 2, self.side / 4];
        let n_last = sides[2] * sides[2];
        let mut d_act = Array2::from_shape_fn((n_last, CHANNELS[3]), |(_, c)| d_pooled[c] / n_last as f64);
        for i in (0..3).rev() {
            let st = &cache.stages[i];
            let h = sides[i];
            let d_pre = &d_act * &st.pre.mapv(|v| ACT.derivative(v));
            let (d_cols, dw, db) = ops::linear_backward(st.cols.view(), p.mat(self.conv_w[i]), d_pre.view());
            g.accumulate(self.conv_w[i], dw.iter().copied());
            g.accumulate(self.conv_b[i], db.iter().copied());
            if i > 0 {
                let d_in = ops::col2im3x3(d_cols.view(), h, h, CHANNELS[i]);
                d_act = ops::avg_pool2_backward(d_in.view(), sides[i - 1], sides[i - 1]);
            }
        }
    }

    pub fn activation_maps(&self, p: &ParamStore, x: &NormalizedImage, tag: &str) -> Option<Vec<Array2<f64>>> {
        let idx = match tag {
            "conv1" => 0,
            "conv2" => 1,
            "conv3" => 2,
            _ => return None,
        };
        let (_, _, taps) = self.run(p, x, false);
        let side = self.side >> idx;
        let act = &taps[idx];
        Some(
            (0..act.ncols())
                .map(|c| {
                    Array2::from_shape_vec((side, side), act.column(c).to_vec()).expect("square map")
                })
                .collect(),
        )
    }
}
