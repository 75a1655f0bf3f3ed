//! Reverse-mode gradients against central finite differences in f64.

mod common;

const TOL: f64 = 1e-5;

#[test]
fn every_case_within_tolerance() {
    let mut failures = Vec::new();
    for (name, case) in common::gradient_cases() {
        match case() {
            Ok(r) if r.passes(TOL) => {}
            Ok(r) => failures.push(format!("{name}: rel error {:.3e}", r.max_rel_error)),
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn audio_conditioning_is_live() {
    let (_, case) = common::gradient_cases()
        .into_iter()
        .find(|(n, _)| *n == "mixed_loss_wrt_audio")
        .unwrap();
    let r = case().unwrap();
    assert!(r.analytic[0].data().iter().any(|v| v.abs() > 1e-8));
}

#[test]
fn zero_init_adapters_still_receive_gradient() {
    use speechlm::declm::{self, LoraConfig};
    use speechlm::numcore::{Graph, ParamStore};
    let lm = common::tiny_lm(7);
    let lora = LoraConfig { rank: 2, alpha: 4.0 };
    let mut s = ParamStore::<f64>::new();
    declm::init(&mut s, &lm, 1);
    declm::init_lora(&mut s, &lm, &lora, 1);
    let g = Graph::with_params(&s);
    let audio = g.constant(common::randn(3, &[2, 8]));
    let loss = declm::mixed_loss(&g, &lm, &lora, Some(audio), &[2, 4], &[4, 3], None).unwrap();
    let grads = g.backward(loss).unwrap();
    // B starts at zero, so only B sees gradient on the first step
    let gb = grads.param("lora.layers.0.v.b").unwrap();
    let ga = grads.param("lora.layers.0.v.a").unwrap();
    assert!(gb.data().iter().any(|v| v.abs() > 0.0));
    assert!(ga.data().iter().all(|&v| v == 0.0));
    assert!(grads.param("lm.layers.0.attn.v.weight").is_none());
}
