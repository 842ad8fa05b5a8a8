// View state and its transitions, kept pure for testability. History
// entries are immutable once appended; overlays are rebuilt from stored
// server responses only.

import type { Rle } from "./rle.js";
import type { InterveneResponse, SampleResponse, SegmentResponse } from "./api.js";

export interface HistoryEntry {
  command: string;
  maskRle: Rle;
  diceBefore: number | null;
  diceAfter: number | null;
  delta: number | null;
}

export interface ViewState {
  domain: string;
  index: number;
  corruption: string | null;
  sampleId: string | null;
  sessionId: string | null;
  imagePng: string | null;
  groundTruth: Rle | null;
  basePrediction: Rle | null;
  baseDice: number | null;
  history: readonly HistoryEntry[];
  selectedEntry: number | null; // index into history; null = base
  overlayOpacity: number;
  showGroundTruth: boolean;
  compareSplit: number; // divider position in [0,1]
  compareMode: boolean;
  inlineError: { message: string; position: number | null } | null;
  snapshotHash: string | null;
}

export function initialState(): ViewState {
  return {
    domain: "id",
    index: 0,
    corruption: null,
    sampleId: null,
    sessionId: null,
    imagePng: null,
    groundTruth: null,
    basePrediction: null,
    baseDice: null,
    history: [],
    selectedEntry: null,
    overlayOpacity: 0.45,
    showGroundTruth: false,
    compareSplit: 0.5,
    compareMode: false,
    inlineError: null,
    snapshotHash: null,
  };
}

export function withSample(
  state: ViewState,
  sample: SampleResponse,
  segment: SegmentResponse,
): ViewState {
  // a fresh sample clears the intervention history
  return {
    ...state,
    sampleId: sample.sample_id,
    sessionId: segment.session_id,
    imagePng: sample.image_png,
    groundTruth: sample.ground_truth_rle,
    basePrediction: segment.mask_rle,
    baseDice: segment.dice,
    history: [],
    selectedEntry: null,
    compareMode: false,
    inlineError: null,
    snapshotHash: segment.snapshot_hash,
  };
}

export function withIntervention(
  state: ViewState,
  command: string,
  response: InterveneResponse,
): ViewState {
  const entry: HistoryEntry = Object.freeze({
    command,
    maskRle: response.mask_rle,
    diceBefore: response.dice_before,
    diceAfter: response.dice_after,
    delta:
      response.dice_after !== null && response.dice_before !== null
        ? response.dice_after - response.dice_before
        : null,
  });
  const history = Object.freeze([...state.history, entry]);
  return {
    ...state,
    history,
    selectedEntry: history.length - 1,
    inlineError: null,
  };
}

export function withParseError(
  state: ViewState,
  message: string,
  position: number | null,
): ViewState {
  // history untouched: a rejected command leaves no trace
  return { ...state, inlineError: { message, position } };
}

export function selectEntry(state: ViewState, index: number | null): ViewState {
  if (index !== null && (index < 0 || index >= state.history.length)) {
    throw new Error(`history index ${index} out of range`);
  }
  return { ...state, selectedEntry: index };
}

export function toggleCompare(state: ViewState): ViewState {
  if (state.history.length === 0) return state;
  return { ...state, compareMode: !state.compareMode };
}

export function activePrediction(state: ViewState): Rle | null {
  if (state.selectedEntry === null) return state.basePrediction;
  return state.history[state.selectedEntry].maskRle;
}

export function formatDelta(delta: number | null): string {
  if (delta === null) return "n/a";
  const sign = delta >= 0 ? "+" : "";
  return `${sign}${delta.toFixed(3)}`;
}
