//! Compares reverse-mode gradients against central finite differences for a
//! few operators and for one full model parameter, in f64.

use caswit::model::{Caswit, ModelConfig};
use caswit::nn::ParamStore;
use caswit::objectives::total_loss;
use caswit::synthetic::{dataset, SceneConfig};
use caswit::tensor::{finite_diff_grad, max_rel_error};
use caswit::{no_grad, Result, Tensor};

fn check(name: &str, x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>) -> Result<()> {
    let xg = x.detach().requiring_grad();
    f(&xg)?.sum().backward()?;
    let numeric = finite_diff_grad(|t| Ok(f(t)?.sum().item()), x, 1e-6)?;
    let err = max_rel_error(&xg.grad_vec().unwrap(), numeric.data());
    println!("{name:<18} max rel error {err:.2e}");
    Ok(())
}

fn main() -> Result<()> {
    let x = Tensor::from_vec((0..24).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect(), &[2, 3, 4])?;
    let gamma = Tensor::from_vec(vec![1.0, 0.5, -0.3, 2.0], &[4])?;
    let beta = Tensor::from_vec(vec![0.1, 0.0, -0.2, 0.3], &[4])?;
    check("softmax", &x, |t| t.softmax_lastdim()?.mul(&t.tanh()))?;
    check("layer_norm", &x, |t| Ok(t.layer_norm(&gamma, &beta, 1e-5)?.gelu()))?;
    check("bmm", &x, |t| t.bmm(&t.transpose(1, 2)?))?;
    check("upsample_bilinear", &x, |t| t.upsample_bilinear(5, 7))?;
    check("unfold3x3", &x, |t| t.unfold3x3())?;

    let mut p = ParamStore::<f64>::new();
    let model = Caswit::new(&mut p, &ModelConfig::toy(4))?;
    let s = dataset(&SceneConfig::default(), 1, 0)?.remove(0);
    let (hr, lr) = (s.hr.cast::<f64>(), s.lr.as_ref().unwrap().cast::<f64>());
    let loss = |p: &ParamStore<f64>| -> Result<f64> {
        let out = model.forward_train(p, &hr, Some(&lr))?;
        Ok(total_loss(&out.hr, out.lr.as_ref().unwrap(), &s.labels, 0.5)?.item())
    };
    let out = model.forward_train(&p, &hr, Some(&lr))?;
    total_loss(&out.hr, out.lr.as_ref().unwrap(), &s.labels, 0.5)?.backward()?;
    let name = "decoder.classifier.weight";
    let g = p.get(name)?.grad_vec().unwrap();
    let i = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
    let base = p.get(name)?.to_vec();
    let _ng = no_grad();
    let mut shifted = |d: f64| -> Result<f64> {
        let mut v = base.clone();
        v[i] += d;
        p.set_data(name, v)?;
        loss(&p)
    };
    let fd = (shifted(1e-5)? - shifted(-1e-5)?) / 2e-5;
    println!("{name}[{i}] analytic {:.6e} numeric {fd:.6e}", g[i]);
    Ok(())
}
