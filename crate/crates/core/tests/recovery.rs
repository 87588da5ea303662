use drainsim::addrmap::{AddressMapping, PhysAddr};
use drainsim::dram::{DramPairProbe, DramTiming};
use drainsim::memctrl::DrainChannelProbe;
use drainsim::recover::{random_mapping, recover_mapping, same_partition, RecoveryError, RecoveryParams};
use drainsim::simcore::SimRng;
use drainsim::ClockDomain;
use rand::Rng;

fn clock() -> ClockDomain {
    ClockDomain::new("mc", 1_300_000_000).unwrap()
}

fn sample(n: usize, seed: u64) -> Vec<PhysAddr> {
    let mut rng = SimRng::new(seed).stream("addrs");
    (0..n).map(|_| PhysAddr(rng.gen::<u64>() & 0x7fff_ffc0)).collect()
}

fn recover(truth: &AddressMapping, noise: u32, seed: u64) -> Result<AddressMapping, RecoveryError> {
    let mut ch = DrainChannelProbe::new(truth.clone(), DramTiming::default(), clock());
    let mut bank = DramPairProbe::new(truth.clone(), DramTiming::default(), clock())
        .with_noise(noise, SimRng::new(seed).stream("noise"));
    let p = RecoveryParams { seed, ..RecoveryParams::default() };
    recover_mapping(&mut ch, &mut bank, &p).map(|r| r.mapping)
}

#[test]
fn default_mapping_recovered_exactly() {
    let truth = AddressMapping::default();
    let got = recover(&truth, 0, 3).unwrap();
    assert_eq!(got.channel_fn.as_ref().unwrap().mask(), truth.channel_fn.as_ref().unwrap().mask());
    assert!(same_partition(&truth, &got, &sample(10_000, 9)));
}

#[test]
fn noisy_bank_probe_still_separates() {
    let truth = AddressMapping::default();
    let got = recover(&truth, 4, 5).unwrap();
    assert!(same_partition(&truth, &got, &sample(10_000, 10)));
}

#[test]
fn twenty_random_mappings() {
    let addrs = sample(10_000, 11);
    for s in 0..20 {
        let truth = random_mapping(100 + s, 6..=20, 17);
        let got = recover(&truth, 0, s).unwrap_or_else(|e| panic!("mapping {s}: {e}"));
        assert!(same_partition(&truth, &got, &addrs), "mapping {s}");
    }
}

#[test]
fn too_few_conflicts_reports_ambiguous_bits() {
    let truth = AddressMapping::default();
    let mut ch = DrainChannelProbe::new(truth.clone(), DramTiming::default(), clock());
    let mut bank = DramPairProbe::new(truth, DramTiming::default(), clock());
    let p = RecoveryParams { bank_rounds: 40, ..RecoveryParams::default() };
    match recover_mapping(&mut ch, &mut bank, &p) {
        Err(RecoveryError::InsufficientSamples { what: "bank", ambiguous }) => assert!(!ambiguous.is_empty()),
        other => panic!("{other:?}"),
    }
}
