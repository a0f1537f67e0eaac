use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use raanet::autodiff::Tape;
use raanet::encodings::{encodings, make_encodings};
use raanet::params::ParamStore;
use raanet::raaconv::{Branch, ConvSpec, RaaConvLayer};
use raanet::tensor::Tensor;

fn layer(spec: ConvSpec, seed: u64) -> (ParamStore<f64>, RaaConvLayer) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = RaaConvLayer::new(&mut store, "raa", spec, &mut rng).unwrap();
    (store, l)
}

fn random_input(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encodings_bounded_and_symmetric(h in 1usize..=512, w in 1usize..=512) {
        let e = make_encodings(h, w).unwrap();
        prop_assert_eq!(e.xi.shape(), &[1, 2, h, w]);
        for i in 0..h {
            for j in 0..w {
                let (r, c, rho) = (e.row(i, j), e.col(i, j), e.range(i, j));
                prop_assert!((0.0..=1.0).contains(&r) && (0.0..=1.0).contains(&c));
                prop_assert!((-1.0..=1.0).contains(&rho));
            }
        }
        // The maps are symmetric about the half-index: 1-based i and H - i agree.
        for i in 1..h {
            for j in 1..w {
                let (a, b) = ((i - 1, j - 1), (h - i - 1, w - j - 1));
                prop_assert_eq!(e.row(a.0, a.1), e.row(b.0, a.1));
                prop_assert_eq!(e.col(a.0, a.1), e.col(a.0, b.1));
                prop_assert_eq!(e.range(a.0, a.1), e.range(b.0, b.1));
            }
        }
    }

    #[test]
    fn encodings_monotone(h in 1usize..=128, w in 1usize..=128) {
        let e = make_encodings(h, w).unwrap();
        let mid = w as f64 / 2.0;
        for i in 0..h {
            for j in 1..w {
                let (a, b) = ((j as f64 - mid).abs(), (j as f64 + 1.0 - mid).abs());
                if b > a {
                    prop_assert!(e.col(i, j) >= e.col(i, j - 1));
                }
            }
        }
        let mut cells: Vec<(f64, f64)> = (0..h)
            .flat_map(|i| (0..w).map(move |j| (i, j)))
            .map(|(i, j)| (e.row(i, j).hypot(e.col(i, j)), e.range(i, j)))
            .collect();
        cells.sort_by(|a, b| a.0.total_cmp(&b.0));
        for pair in cells.windows(2) {
            prop_assert!(pair[1].1 >= pair[0].1 - 1e-14);
        }
    }

    #[test]
    fn raa_output_shape(
        n in 1usize..3, c_in in 1usize..4, half in 1usize..4,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3,
        h in 1usize..9, w in 1usize..9, seed in 0u64..1000,
    ) {
        let spec = ConvSpec::same(c_in, 2 * half, k, stride);
        let (store, l) = layer(spec, seed);
        let mut tape = Tape::new();
        let x = tape.constant(random_input(vec![n, c_in, h, w], seed));
        let out = l.forward_with_attention(&mut tape, &store, x).unwrap();
        let (ho, wo) = ((h + 2 * (k / 2) - k) / stride + 1, (w + 2 * (k / 2) - k) / stride + 1);
        prop_assert_eq!(tape.value(out.output).shape(), &[n, 2 * half, ho, wo]);
        prop_assert_eq!(tape.value(out.attn_a).shape(), &[n, 1, ho, wo]);
    }

    #[test]
    fn zero_gamma_is_two_plain_convs(
        n in 1usize..3, c_in in 1usize..4, half in 1usize..4,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3,
        h in 2usize..9, w in 2usize..9, seed in 0u64..1000,
    ) {
        let spec = ConvSpec::same(c_in, 2 * half, k, stride);
        let (mut store, l) = layer(spec, seed);
        for br in [Branch::A, Branch::B] {
            store.get_mut(l.gamma(br)).value.data_mut()[0] = 0.0;
        }
        let mut tape = Tape::new();
        let x = tape.constant(random_input(vec![n, c_in, h, w], seed + 1));
        let out = l.forward(&mut tape, &store, x).unwrap();

        let mut reference = Tape::new();
        let xr = reference.constant(random_input(vec![n, c_in, h, w], seed + 1));
        let mut plain = Vec::new();
        for br in [Branch::A, Branch::B] {
            let kv = reference.param(&store, l.feature_kernel(br));
            let bv = reference.param(&store, l.feature_bias(br));
            plain.push(reference.conv2d(xr, kv, bv, stride, k / 2).unwrap());
        }
        let want = reference.concat_channels(plain[0], plain[1]).unwrap();
        let got: Vec<u64> = tape.value(out).data().iter().map(|v| v.to_bits()).collect();
        let exp: Vec<u64> = reference.value(want).data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, exp);
    }

    #[test]
    fn twin_branches_differ_under_mirrored_encodings(seed in 0u64..1000, h in 4usize..9, w in 4usize..9) {
        let (mut store, l) = layer(ConvSpec::same(2, 4, 3, 1), seed);
        twin(&mut store, &l);
        let mut tape = Tape::new();
        let x = tape.constant(random_input(vec![1, 2, h, w], seed));
        let (fa, fb) = l.attention_maps(&mut tape, &store, x).unwrap();
        prop_assert!(fa.data() != fb.data());
    }
}

/// Copies every branch-a parameter onto branch b.
fn twin(store: &mut ParamStore<f64>, l: &RaaConvLayer) {
    let copies = [
        (l.feature_kernel(Branch::A), l.feature_kernel(Branch::B)),
        (l.feature_bias(Branch::A), l.feature_bias(Branch::B)),
        (l.gamma(Branch::A), l.gamma(Branch::B)),
    ];
    let attn = l.attention_params(Branch::A).into_iter().zip(l.attention_params(Branch::B));
    for (src, dst) in copies.into_iter().chain(attn) {
        let v = store.value(src).clone();
        store.get_mut(dst).value = v;
    }
}

#[test]
fn twin_branches_agree_only_at_mirror_fixed_points() {
    // With a centre-only attention kernel a cell sees only its own encodings, so the
    // branches coincide exactly where ξ = 1 − ξ and ρ = −ρ, i.e. r = c = 1/2.
    let (mut store, l) = layer(ConvSpec::same(3, 4, 3, 1), 11);
    let attn_kernel = l.attention_params(Branch::A)[2];
    for (t, v) in store.get_mut(attn_kernel).value.data_mut().iter_mut().enumerate() {
        if t % 9 != 4 {
            *v = 0.0;
        }
    }
    twin(&mut store, &l);
    let (h, w) = (4, 8);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(vec![1, 3, h, w], 0.7));
    let (fa, fb) = l.attention_maps(&mut tape, &store, x).unwrap();
    let enc = encodings(h, w).unwrap();
    let mut fixed = 0;
    for i in 0..h {
        for j in 0..w {
            let at_fixed_point = enc.row(i, j) == 0.5 && enc.col(i, j) == 0.5;
            let same = fa.at4(0, 0, i, j) == fb.at4(0, 0, i, j);
            assert_eq!(same, at_fixed_point, "cell ({i}, {j})");
            fixed += at_fixed_point as usize;
        }
    }
    assert_eq!(fixed, 4);
}

#[test]
fn encodings_are_constants_in_the_graph() {
    let (store, l) = layer(ConvSpec::same(2, 2, 3, 1), 3);
    let mut tape = Tape::new();
    let x = tape.input(random_input(vec![1, 2, 5, 5], 3));
    l.forward(&mut tape, &store, x).unwrap();
    let enc = encodings(5, 5).unwrap();
    let mirrored = enc.xi.map(|v| 1.0 - v);
    let negated = enc.rho.map(|v| -v);
    let mut found = 0;
    for v in tape.vars() {
        let t = tape.value(v);
        if [&enc.xi, &enc.rho, &mirrored, &negated].contains(&t) {
            assert!(!tape.requires_grad(v));
            found += 1;
        }
    }
    assert_eq!(found, 4);
    assert!(tape.requires_grad(x));
}
