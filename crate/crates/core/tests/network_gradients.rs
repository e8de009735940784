use reentangle::netcheck::{check_network, Network, DEFAULT_EPS};
use reentangle::nn::{Dims, DEFAULT_HIDDEN};

const TOL: f64 = 1e-4;

#[test]
fn every_network_shape_matches_finite_differences() {
    for (i, net) in Network::ALL.into_iter().enumerate() {
        let rep = check_network(net, Dims::default(), DEFAULT_HIDDEN, 100, 1000 + i as u64, DEFAULT_EPS).unwrap();
        assert!(rep.passes(TOL), "{}: {rep:?}", net.name());
        // kinks are rare at these scales; nearly everything must be checked
        assert!(rep.excluded * 20 < rep.checked, "{}: {rep:?}", net.name());
    }
}

#[test]
fn wider_latents_also_check() {
    let dims = Dims::new(2, 3).unwrap();
    for net in Network::ALL {
        let rep = check_network(net, dims, 8, 5, 7, DEFAULT_EPS).unwrap();
        assert!(rep.passes(TOL), "{}: {rep:?}", net.name());
    }
}
