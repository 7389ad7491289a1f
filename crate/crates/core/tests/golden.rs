//! Logits of the default model on two fixed images, recorded once the
//! gradient checks passed. Guards against silent changes to the forward
//! pass, the initializer or the data generator.

use olora::lora::LoraStack;
use olora::stream::{gen_synthetic, DataSpec};
use olora::vit::{ViTConfig, ViTModel};

#[rustfmt::skip]
const GOLDEN: [f32; 40] = [
    -0.22423548, -0.27887496, -0.1621847, -0.24668977, -0.010422638, -0.3136121, -0.003869763, -0.032443684,
    0.014615039, -0.051405896, 0.06303328, -0.009821464, 0.21890722, 0.053935617, 0.09247778, 0.17079888,
    -0.094622396, -0.23919283, -0.2536294, -0.07504751,
    -0.21165201, -0.2978345, -0.15387042, -0.26797965, 0.0039463434, -0.31571794, -0.008005137, -0.03629959,
    0.007924363, -0.047603585, 0.08201751, -0.008691696, 0.22327591, 0.043865386, 0.08417728, 0.17706135,
    -0.082244806, -0.22864825, -0.2307863, -0.08042999,
];

#[test]
fn default_model_reproduces_recorded_logits() {
    let ds = gen_synthetic(&DataSpec::default()).unwrap();
    let x = ds.gather(&[0, 200]);
    let model = ViTModel::<f32>::init(&ViTConfig::default()).unwrap();
    let logits = model.logits(&LoraStack::new(2, 64), &x).unwrap();
    assert_eq!(logits.shape(), [2, 20]);
    for (i, (&got, &want)) in logits.data().iter().zip(&GOLDEN).enumerate() {
        assert!((got - want).abs() < 1e-5, "logit {i}: {got} vs {want}");
    }
}
