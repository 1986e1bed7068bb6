use cellsim::init::InitialCharge;
use cellsim::{Engine32, Engine64, EngineConfig, Params64, Scenario, Termination};

/// The f32 engine follows the f64 one closely over a full discharge and a dynamic profile.
#[test]
fn single_precision_tracks_double() {
    for (name, n) in [("ncm523", 1), ("ncm811", 5), ("lfpo", 6)] {
        let p = Params64::preset(name).unwrap();
        let sc = Scenario::standard(n, &p).unwrap();
        let soc0 = sc.soc0.unwrap();
        let mut e64 = Engine64::new(p.clone(), EngineConfig::default()).unwrap();
        let mut s64 = e64.initial_state(InitialCharge::Soc(soc0), sc.t_amb).unwrap();
        let a = e64.run(&mut s64, &sc, None).unwrap();
        let mut e32 = Engine32::new(p.cast::<f32>(), EngineConfig::default()).unwrap();
        let mut s32 = e32.initial_state(InitialCharge::Soc(soc0 as f32), sc.t_amb as f32).unwrap();
        let b = e32.run(&mut s32, &sc, None).unwrap();
        assert!(!matches!(b.termination, Termination::Failed(_)), "{name}: {}", b.termination);
        let common = a.records.len().min(b.records.len());
        assert!(a.records.len().abs_diff(b.records.len()) <= 2, "{name}: {} vs {}", a.records.len(), b.records.len());
        let dv = (0..common).map(|k| (a.records[k].v - b.records[k].v).abs()).fold(0.0, f64::max);
        let dsoc = (0..common).map(|k| (a.records[k].soc - b.records[k].soc).abs()).fold(0.0, f64::max);
        println!("{name} scenario {n}: max |dV| {dv:.2e} V, max |dSOC| {dsoc:.2e}");
        assert!(dv < 1e-3 && dsoc < 1e-4, "{name}: dV {dv}, dSOC {dsoc}");
    }
}
