use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use scope_client::{ClientError, EventStream, SessionControl};
use scope_core::backends::mock::{MockConfig, MockNoise, PropagationMode};
use scope_core::backends::scene::SceneParams;
use scope_core::config::ScopeConfig;
use scope_core::session::{
    event_sequence_hash, mock_session_header, run_scripted_session, ClientCommand, CommandEnvelope, ScriptEntry,
    ServerMessage, Session, SessionEvent,
};
use scope_server::{AppState, Clock, LiveSession};

fn utter(frame: usize, text: &str) -> ScriptEntry {
    ScriptEntry {
        frame,
        command: ClientCommand::Utterance(text.into()),
    }
}

fn happy_script() -> Vec<ScriptEntry> {
    vec![
        utter(0, "hello"),
        utter(1, "segment the surgical instruments"),
        utter(2, "the first one, label it suction"),
        utter(3, "segment the tip of suction"),
        utter(4, "the first one"),
    ]
}

fn noisy() -> MockConfig {
    MockConfig {
        noise: MockNoise {
            truth_score: 0.9,
            extra_blobs: 6,
            whole_frame: false,
        },
        propagation: PropagationMode::Oracle,
    }
}

fn scripted_hash(seed: u64, params: SceneParams, mock: MockConfig, script: Vec<ScriptEntry>) -> String {
    let (header, _, backends) = mock_session_header(seed, params, ScopeConfig::default(), Some(mock), script).unwrap();
    run_scripted_session(header, backends, None).unwrap().log.event_hash()
}

fn start(seed: u64, params: SceneParams, mock: MockConfig, clock: Clock) -> (Arc<LiveSession>, SocketAddr) {
    let (header, _, backends) = mock_session_header(seed, params, ScopeConfig::default(), Some(mock), Vec::new()).unwrap();
    let session = Session::new(header.config.clone(), header.frames.clone(), backends).unwrap();
    let live = LiveSession::start(session, clock, header.config.session.event_buffer);
    let state = AppState {
        backends: None,
        live: Some(live.clone()),
    };
    let addr = scope_server::spawn("127.0.0.1:0".parse().unwrap(), state).unwrap();
    (live, addr)
}

fn is_control(e: &SessionEvent) -> bool {
    !e.body.is_droppable()
}

#[test]
fn http_commands_reproduce_the_scripted_run() {
    let (live, addr) = start(7, SceneParams::default(), MockConfig::default(), Clock::Manual);
    let control = SessionControl::new(&format!("http://{addr}")).unwrap();
    let script = happy_script();
    for t in 0..100 {
        for e in script.iter().filter(|e| e.frame == t) {
            let ack = control
                .command(&CommandEnvelope {
                    id: Some(format!("c{t}")),
                    command: e.command.clone(),
                })
                .unwrap();
            assert_eq!(ack, ServerMessage::Ack { id: Some(format!("c{t}")), duplicate: false });
        }
        let report = control.advance(1).unwrap();
        assert_eq!(report.processed, 1);
    }
    assert!(live.is_finished());
    let events = live.hub().events();
    assert_eq!(event_sequence_hash(&events), scripted_hash(7, SceneParams::default(), MockConfig::default(), script));
    let snap = control.snapshot().unwrap();
    assert_eq!(snap, live.hub().snapshot());
    assert_eq!(snap.clicks, 1);
}

#[test]
fn duplicate_ids_are_accepted_once() {
    let (live, addr) = start(7, SceneParams::default(), MockConfig::default(), Clock::Manual);
    let control = SessionControl::new(&format!("http://{addr}")).unwrap();
    let cmd = CommandEnvelope {
        id: Some("same".into()),
        command: ClientCommand::Utterance("hello".into()),
    };
    assert_eq!(control.command(&cmd).unwrap(), ServerMessage::Ack { id: Some("same".into()), duplicate: false });
    assert_eq!(control.command(&cmd).unwrap(), ServerMessage::Ack { id: Some("same".into()), duplicate: true });
    control.advance(1).unwrap();
    let texts = live.hub().events().iter().filter(|e| e.kind() == "agent_text").count();
    assert_eq!(texts, 1);
}

#[test]
fn commands_after_the_end_are_refused() {
    let params = SceneParams {
        frames: 12,
        contacts: Vec::new(),
        ..SceneParams::default()
    };
    let (_, addr) = start(1, params, MockConfig::default(), Clock::Manual);
    let control = SessionControl::new(&format!("http://{addr}")).unwrap();
    let report = control.advance(50).unwrap();
    assert_eq!((report.processed, report.finished), (12, true));
    let err = control
        .command(&CommandEnvelope {
            id: None,
            command: ClientCommand::Stop {},
        })
        .unwrap_err();
    assert!(matches!(err, ClientError::Status { status: 409, .. }), "{err:?}");
}

#[test]
fn slow_subscriber_loses_only_frame_kind_events() {
    let params = SceneParams {
        frames: 300,
        ..SceneParams::default()
    };
    let (live, _) = start(5, params, MockConfig::default(), Clock::Manual);
    let slow = live.hub().subscribe(None);
    for e in happy_script() {
        live.submit(CommandEnvelope { id: None, command: e.command }).unwrap();
        live.advance_blocking(1).unwrap();
    }
    live.advance_blocking(1000).unwrap();
    let all = live.hub().events();
    let batch = slow.try_drain();
    let controls: Vec<u64> = all.iter().filter(|e| is_control(e)).map(|e| e.seq).collect();
    let kept_controls: Vec<u64> = batch.events.iter().filter(|e| is_control(e)).map(|e| e.seq).collect();
    assert_eq!(kept_controls, controls);
    assert!(batch.events.len() <= live.hub().capacity() + controls.len());
    let (_, total) = batch.dropped.expect("drops reported");
    assert_eq!(total as usize, all.len() - batch.events.len());
    assert!(total > 0);
    // what is kept is in order and is the newest of the droppable events
    assert!(batch.events.windows(2).all(|w| w[0].seq < w[1].seq));
    assert_eq!(batch.events.last().unwrap().seq, all.last().unwrap().seq);
}

#[test]
fn realtime_clock_runs_to_the_end() {
    let params = SceneParams {
        frames: 40,
        contacts: Vec::new(),
        ..SceneParams::default()
    };
    let (live, addr) = start(2, params, MockConfig::default(), Clock::Realtime(Duration::from_millis(2)));
    let deadline = Instant::now() + Duration::from_secs(20);
    while !live.is_finished() && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(5));
    }
    assert!(live.is_finished());
    let frames: Vec<usize> = live.hub().events().iter().map(|e| e.frame).collect();
    assert_eq!(frames, (0..40).collect::<Vec<_>>());
    let control = SessionControl::new(&format!("http://{addr}")).unwrap();
    assert!(matches!(control.advance(1), Err(ClientError::Status { status: 409, .. })));
}

async fn next_message(stream: &mut EventStream) -> ServerMessage {
    tokio::time::timeout(Duration::from_secs(10), stream.next())
        .await
        .expect("message within 10 s")
        .expect("stream open")
        .expect("valid message")
}

async fn next_event(stream: &mut EventStream) -> SessionEvent {
    loop {
        if let ServerMessage::Event { event } = next_message(stream).await {
            return event;
        }
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn late_subscriber_gets_snapshot_then_tail() {
    let (live, addr) = start(7, SceneParams::default(), MockConfig::default(), Clock::Manual);
    for e in happy_script() {
        live.submit(CommandEnvelope { id: None, command: e.command }).unwrap();
        live.advance(1).await.unwrap();
    }
    live.advance(10).await.unwrap();
    let mut stream = EventStream::connect(&format!("http://{addr}"), None).await.unwrap();
    let snapshot = match next_message(&mut stream).await {
        ServerMessage::Snapshot { snapshot } => snapshot,
        other => panic!("{other:?}"),
    };
    assert_eq!(snapshot, live.hub().snapshot());
    assert_eq!(snapshot.objects.len(), 2);
    let last = snapshot.last_seq.unwrap();
    live.advance(3).await.unwrap();
    let e = next_event(&mut stream).await;
    assert_eq!(e.seq, last + 1);
    assert_eq!(e.frame, 15);
}

#[tokio::test(flavor = "multi_thread")]
async fn select_over_the_socket_equals_the_spoken_ordinal() {
    let (live, addr) = start(9, SceneParams::default(), noisy(), Clock::Manual);
    let mut stream = EventStream::connect(&format!("http://{addr}"), None).await.unwrap();
    assert!(matches!(next_message(&mut stream).await, ServerMessage::Snapshot { .. }));
    live.advance(1).await.unwrap();
    let send = |text: ClientCommand, id: &str| CommandEnvelope {
        id: Some(id.into()),
        command: text,
    };
    stream.send(&send(ClientCommand::Utterance("segment the surgical instruments".into()), "a")).await.unwrap();
    loop {
        if let ServerMessage::Ack { id, duplicate } = next_message(&mut stream).await {
            assert_eq!((id.as_deref(), duplicate), (Some("a"), false));
            break;
        }
    }
    live.advance(1).await.unwrap();
    stream.send(&send(ClientCommand::Select(3), "b")).await.unwrap();
    loop {
        if let ServerMessage::Ack { .. } = next_message(&mut stream).await {
            break;
        }
    }
    live.advance(200).await.unwrap();
    let live_events = live.hub().events();
    let selected: Vec<_> = live_events.iter().filter(|e| e.kind() == "mask_selected").collect();
    assert_eq!(selected.len(), 1);
    let spoken = scripted_hash(
        9,
        SceneParams::default(),
        noisy(),
        vec![utter(1, "segment the surgical instruments"), utter(2, "the third one")],
    );
    assert_eq!(event_sequence_hash(&live_events), spoken);
}

#[tokio::test(flavor = "multi_thread")]
async fn reconnect_resumes_without_repeats() {
    let (live, addr) = start(7, SceneParams::default(), MockConfig::default(), Clock::Manual);
    let base = format!("http://{addr}");
    let mut stream = EventStream::connect(&base, None).await.unwrap();
    assert!(matches!(next_message(&mut stream).await, ServerMessage::Snapshot { .. }));
    let mut seen: Vec<SessionEvent> = Vec::new();
    let script = happy_script();
    for (i, e) in script.iter().enumerate() {
        live.submit(CommandEnvelope { id: None, command: e.command.clone() }).unwrap();
        live.advance(1).await.unwrap();
        if i == 2 {
            // drop mid-session; frames keep coming while disconnected
            let want = live.hub().events().last().unwrap().seq;
            while seen.last().map(|e| e.seq) != Some(want) {
                seen.push(next_event(&mut stream).await);
            }
            let resume_from = stream.last_seq();
            stream.close().await;
            live.advance(1).await.unwrap();
            stream = EventStream::connect(&base, resume_from).await.unwrap();
        }
    }
    live.advance(200).await.unwrap();
    let all = live.hub().events();
    let last = all.last().unwrap().seq;
    while seen.last().map(|e| e.seq) != Some(last) {
        seen.push(next_event(&mut stream).await);
    }
    let seqs: Vec<u64> = seen.iter().map(|e| e.seq).collect();
    assert_eq!(seqs, (0..=last).collect::<Vec<_>>());
    assert_eq!(seen, all);
    let controls = seen.iter().filter(|e| is_control(e)).count();
    assert_eq!(controls, all.iter().filter(|e| is_control(e)).count());

    // a client-side reconnect picks up at the same point
    let before = stream.last_seq();
    let stream = stream.reconnect().await.unwrap();
    assert_eq!(stream.last_seq(), before);
}
