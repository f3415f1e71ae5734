use cemoe_core::accounting::{
    ce_addend, count_active, moe_active_ce, moe_active_full, olmoe, param_report, phi_moe, round1, ArchSpec,
    CountMode,
};

/// Walks every parameter the forward pass touches, one weight matrix at a
/// time, and adds up their sizes.
fn enumerate_active(spec: &ArchSpec, compressed: bool) -> u64 {
    let (d, f) = (spec.hidden_dim, spec.ffn_dim);
    let mut total = 0u64;
    for _layer in 0..spec.n_moe_layers {
        let evaluated = if compressed { spec.k_main } else { spec.k_active };
        for _expert in 0..evaluated {
            for shape in [(d, f), (d, f), (f, d)] {
                total += shape.0 * shape.1;
            }
        }
        if compressed {
            // The θ vector added to the input, plus the bank rows it is built
            // from, counted as the compressed stand-in for the three
            // projections of the dropped experts.
            total += 3 * (2 * d + f);
        }
    }
    total
}

#[test]
fn phi_moe_counts() {
    let spec = phi_moe();
    assert_eq!(moe_active_full(&spec).unwrap(), 5_033_164_800);
    assert_eq!(moe_active_ce(&spec).unwrap(), 2_517_983_232);
    let r = param_report(&spec).unwrap();
    assert_eq!(r.total_active_full, 7_433_164_800);
    assert_eq!(r.total_active_ce, 4_917_983_232);
    assert_eq!(r.saving_percent(), 33.8);
    // Totals as printed, at three significant figures.
    assert_eq!(round1((1.0 - 4.93 / 7.45) * 100.0), 33.8);
}

#[test]
fn olmoe_counts() {
    let spec = olmoe();
    assert_eq!(moe_active_full(&spec).unwrap(), 805_306_368);
    assert_eq!(moe_active_ce(&spec).unwrap(), 402_898_944);
    assert_eq!(param_report(&spec).unwrap().saving_percent(), 31.4);
}

#[test]
fn enumeration_agrees_with_closed_form() {
    for (k, km, layers) in [(2, 1, 3), (8, 4, 2), (4, 4, 1), (6, 1, 5)] {
        let spec = ArchSpec {
            name: "small".into(),
            hidden_dim: 64,
            ffn_dim: 96,
            n_moe_layers: layers,
            n_experts: 8,
            k_active: k,
            k_main: km,
            non_moe_params: 1000,
            matrices_per_expert: 3,
        };
        assert_eq!(moe_active_full(&spec).unwrap(), enumerate_active(&spec, false));
        if km < k {
            assert_eq!(moe_active_ce(&spec).unwrap(), enumerate_active(&spec, true));
        }
        assert_eq!(count_active(&spec, CountMode::Full).unwrap(), moe_active_full(&spec).unwrap());
    }
}

#[test]
fn ce_count_is_main_experts_plus_addend() {
    let spec = phi_moe();
    let (d, f, l) = (4096u64, 6400u64, 32u64);
    assert_eq!(ce_addend(&spec).unwrap(), 3 * (2 * d + f) * l);
    assert_eq!(moe_active_ce(&spec).unwrap(), 3 * d * f * l + ce_addend(&spec).unwrap());
    assert!(moe_active_ce(&spec).unwrap() < moe_active_full(&spec).unwrap());
}
