// temporary instrumentation test
#[test]
fn fd_debug_per_leaf() {
    use affkit::model::*;
    use affkit::data::TaskKind;
    use affkit::autodiff::*;
    use affkit::autodiff::check::*;
    let cfg = BackboneConfig { input_size: 8, channels: [2,3], feature_dim: 4, seed: 42 };
    let model = MultiHeadModel::new(TaskKind::Mtl, cfg, 1).unwrap();
    let batch = {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let n = 2*3*8*8;
        let v: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::new(vec![2,3,8,8], v).unwrap()
    };
    // analytic
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &batch, TaskKind::Mtl).unwrap();
    let sq = tape.mul(pass.expr_probs, pass.expr_probs).unwrap();
    let mut loss = tape.mean(sq).unwrap();
    if let Some(va) = pass.va { let s = tape.mul(va, va).unwrap(); let m = tape.mean(s).unwrap(); loss = tape.add(loss, m).unwrap(); }
    if let Some(au) = pass.au_probs { let s = tape.mul(au, au).unwrap(); let m = tape.mean(s).unwrap(); loss = tape.add(loss, m).unwrap(); }
    tape.backward(loss).unwrap();
    let names: Vec<String> = model.named_params().iter().map(|(n,_)| n.clone()).collect();
    for (i, &v) in pass.param_vars.iter().enumerate() {
        let g = tape.grad_f64(v).map(|g| g.to_vec()).unwrap_or_default();
        let gmax = g.iter().fold(0.0f64, |a,&b| a.max(b.abs()));
        println!("{} len={} gmax={:.4e}", names[i], tape.len_of(v), gmax);
    }
    // numeric for one suspicious param: recompute loss at perturbed values
    let mut m2 = model.clone();
    let eval = |m: &MultiHeadModel| -> f64 {
        let mut t = Tape::with_precision(Precision::Double);
        let pass = m.forward(&mut t, &batch, TaskKind::Mtl).unwrap();
        let sq = t.mul(pass.expr_probs, pass.expr_probs).unwrap();
        let mut loss = t.mean(sq).unwrap();
        if let Some(va) = pass.va { let s = t.mul(va, va).unwrap(); let mm = t.mean(s).unwrap(); loss = t.add(loss, mm).unwrap(); }
        if let Some(au) = pass.au_probs { let s = t.mul(au, au).unwrap(); let mm = t.mean(s).unwrap(); loss = t.add(loss, mm).unwrap(); }
        t.scalar_value(loss).unwrap()
    };
    for pi in 0..names.len() {
        let len = m2.named_params()[pi].1.len();
        let mut worst = 0.0f64; let mut worst_j = 0; let mut worst_pair=(0.0,0.0);
        for j in 0..len {
            let orig = m2.named_params()[pi].1.values()[j];
            let hi = (orig as f64 + 1e-3) as f32;
            let lo = (orig as f64 - 1e-3) as f32;
            m2.named_params_mut()[pi].1.values_mut()[j] = hi;
            let p = eval(&m2);
            m2.named_params_mut()[pi].1.values_mut()[j] = lo;
            let q = eval(&m2);
            m2.named_params_mut()[pi].1.values_mut()[j] = orig;
            let num = (p-q)/(hi as f64 - lo as f64);
            let ana = tape.grad_f64(pass.param_vars[pi]).map(|g| g[j]).unwrap_or(0.0);
            let e = rel_err(ana, num);
            if e > worst { worst = e; worst_j = j; worst_pair=(ana,num); }
        }
        println!("param {} worst_rel={:.3e} at {} (ana={:.6e} num={:.6e})", names[pi], worst, worst_j, worst_pair.0, worst_pair.1);
    }
}
