use std::f64::consts::TAU;
use std::path::PathBuf;

use friendsim::agents::{AgentId, Angle};
use friendsim::protocol::{healey_protocol, validate, AngleSet, Frame, Protocol, ProtocolStep};
use friendsim::protofile::{parse, parse_named, serialize, serialize_document, Diagnostic};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn golden() -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/healey_alice.wfp");
    std::fs::read_to_string(path).unwrap()
}

/// Every diagnostic points into the text: an existing line (or line 1 of an
/// empty file) and a column no further than one past the line's end.
fn positions_valid(text: &str, diags: &[Diagnostic]) -> bool {
    let lines: Vec<&str> = text.lines().collect();
    diags.iter().all(|d| {
        let len = match lines.len() {
            0 => 0,
            _ if d.line >= 1 && d.line <= lines.len() => lines[d.line - 1].chars().count(),
            _ => return false,
        };
        d.line >= 1 && d.column >= 1 && d.column <= len + 1
    })
}

#[test]
fn golden_file_round_trips_byte_exact() {
    let text = golden();
    let out = parse_named(&text, "healey_alice");
    assert!(out.diagnostics.is_empty());
    let doc = out.document.unwrap();
    assert_eq!(serialize_document(&doc), text);
    let p = healey_protocol(Frame::AliceFrame, AngleSet::canonical());
    assert_eq!(serialize(&p), text);
    assert_eq!(doc.to_protocol().steps, p.steps);
}

#[test]
fn both_frames_and_modified_protocols_round_trip() {
    use friendsim::protocol::{modified_protocol, BranchChoice};
    let angles = AngleSet::from_radians(0.1, 2.0, 4.5, 6.0).unwrap();
    let mut ps = vec![
        healey_protocol(Frame::AliceFrame, angles),
        healey_protocol(Frame::BobFrame, angles),
    ];
    for a in BranchChoice::BOTH {
        for b in BranchChoice::BOTH {
            ps.push(modified_protocol(a, b, angles));
        }
    }
    for p in ps {
        let text = serialize(&p);
        let doc = parse(&text).document.unwrap();
        assert_eq!(doc.to_protocol().steps, p.steps, "{text}");
        assert_eq!(doc.declared_angles, p.angles);
        assert_eq!(serialize_document(&doc), text);
    }
}

#[test]
fn undo_after_read_has_positioned_diagnostic() {
    let text = "angles a=0 b=0 c=0 d=0\n\nprepare singlet\n  umeasure Carol system1 angle=c\n  pread Carol\n  undo Alice Carol\n";
    let out = parse(text);
    assert!(out.document.is_none());
    let d = out.errors().next().unwrap();
    assert_eq!((d.line, d.column), (6, 3));
    assert!(d.message.contains("UndoAfterRead"));
    assert!(d.message.contains("line 5") && d.message.contains("line 6"));
    assert!(positions_valid(text, &out.diagnostics));
}

#[derive(Clone, Debug)]
enum AngleChoice {
    Binding(usize),
    PiFraction(i64, u64),
    Radians(f64),
}

fn angle_choice() -> impl Strategy<Value = AngleChoice> {
    prop_oneof![
        (0usize..4).prop_map(AngleChoice::Binding),
        (-20i64..20, 1u64..13).prop_map(|(k, n)| AngleChoice::PiFraction(k, n)),
        (0.0..TAU).prop_map(AngleChoice::Radians),
    ]
}

fn resolve(c: &AngleChoice, g: &AngleSet) -> Angle {
    match *c {
        AngleChoice::Binding(i) => [g.a, g.b, g.c, g.d][i],
        AngleChoice::PiFraction(k, n) => Angle::pi_fraction(k, n).unwrap(),
        AngleChoice::Radians(r) => Angle::new(r).unwrap(),
    }
}

fn header_angle() -> impl Strategy<Value = Angle> {
    prop_oneof![
        (-8i64..8, 1u64..9).prop_map(|(k, n)| Angle::pi_fraction(k, n).unwrap()),
        (-10.0..10.0f64).prop_map(|r| Angle::new(r).unwrap()),
    ]
}

/// Turns arbitrary actions into a valid protocol by skipping actions the
/// validator would reject in the current register state.
fn build_protocol(g: AngleSet, actions: &[(u8, u8, AngleChoice)]) -> Protocol {
    #[derive(Clone, Copy, PartialEq)]
    enum Reg {
        Ready,
        Recorded,
        Read,
    }
    let mut regs = [Reg::Ready; 4];
    let idx = |a: AgentId| AgentId::ALL.iter().position(|&x| x == a).unwrap();
    let mut steps = vec![ProtocolStep::PrepareSinglet];
    for (kind, who, angle) in actions {
        let agent = AgentId::ALL[*who as usize % 4];
        let angle = resolve(angle, &g);
        let step = match kind % 5 {
            0 | 1 => {
                if regs[idx(agent)] != Reg::Ready {
                    continue;
                }
                regs[idx(agent)] = Reg::Recorded;
                if agent.is_friend() {
                    ProtocolStep::FriendMeasure { agent, angle }
                } else {
                    ProtocolStep::SuperMeasure { agent, angle }
                }
            }
            2 => {
                let friend = if agent.is_friend() { agent } else { agent.partner() };
                if regs[idx(friend)] != Reg::Recorded {
                    continue;
                }
                regs[idx(friend)] = Reg::Ready;
                ProtocolStep::Undo {
                    actor: friend.partner(),
                    friend,
                }
            }
            3 => {
                regs[idx(agent)] = Reg::Read;
                ProtocolStep::ProjectiveRead { agent }
            }
            _ => ProtocolStep::ProjectiveSpin { agent, angle },
        };
        steps.push(step);
    }
    Protocol {
        name: "generated".to_string(),
        steps,
        angles: g,
    }
}

fn protocol_strategy() -> impl Strategy<Value = Protocol> {
    (
        header_angle(),
        header_angle(),
        header_angle(),
        header_angle(),
        prop::collection::vec((any::<u8>(), any::<u8>(), angle_choice()), 0..24),
    )
        .prop_map(|(a, b, c, d, actions)| build_protocol(AngleSet::new(a, b, c, d), &actions))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn parse_serialize_round_trip(p in protocol_strategy()) {
        prop_assert!(validate(&p).is_empty());
        let text = serialize(&p);
        let out = parse_named(&text, "generated");
        prop_assert!(out.diagnostics.is_empty(), "{:?}\n{}", out.diagnostics, text);
        let doc = out.document.unwrap();
        prop_assert_eq!(&doc.to_protocol(), &p);
        let again = parse_named(&serialize_document(&doc), "generated").document.unwrap();
        prop_assert!(doc.structurally_eq(&again));
        prop_assert_eq!(serialize_document(&again), text);
    }

    #[test]
    fn arbitrary_text_never_panics(text in "\\PC{0,200}") {
        let out = parse(&text);
        prop_assert!(positions_valid(&text, &out.diagnostics));
        prop_assert_eq!(out.document.is_some(), out.errors().next().is_none());
    }
}

fn mutate(rng: &mut ChaCha8Rng, base: &str) -> String {
    const PIECES: [&str; 16] = [
        " ", "\n", "#", "=", "pi", "/", "deg", "-", "angle=", "undo", "pread", "Carol", "system3", "é", "0", "9999999999999999999999",
    ];
    let mut chars: Vec<char> = base.chars().collect();
    for _ in 0..rng.gen_range(1..6) {
        let pos = rng.gen_range(0..=chars.len());
        match rng.gen_range(0..3) {
            0 if pos < chars.len() => {
                chars.remove(pos);
            }
            1 => {
                let piece = PIECES[rng.gen_range(0..PIECES.len())];
                for (i, ch) in piece.chars().enumerate() {
                    chars.insert(pos + i, ch);
                }
            }
            _ if pos < chars.len() => chars[pos] = char::from(rng.gen_range(0x20u8..0x7f)),
            _ => {}
        }
    }
    chars.into_iter().collect()
}

#[test]
fn fuzz_hundred_thousand_inputs() {
    let base = golden();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut accepted = 0;
    for i in 0..100_000 {
        let text = if i % 2 == 0 {
            let len = rng.gen_range(0..160);
            let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            String::from_utf8_lossy(&bytes).into_owned()
        } else {
            mutate(&mut rng, &base)
        };
        let out = parse(&text);
        assert!(positions_valid(&text, &out.diagnostics), "bad position for input {text:?}: {:?}", out.diagnostics);
        if out.document.is_some() {
            accepted += 1;
        } else {
            assert!(out.errors().next().is_some(), "{text:?}");
        }
    }
    // The mutation half must reach both the accepting and rejecting paths.
    assert!(accepted > 100, "only {accepted} inputs parsed");
}
