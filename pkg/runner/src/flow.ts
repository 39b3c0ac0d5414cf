/** Credit-window bookkeeping and trace validation for one connection. */

import { CreditViolation } from "./wire";

/**
 * Credit bookkeeping for one side of one connection.
 *
 * The sender may only send DATA while creditsRemaining >= 1; the
 * receiver's granted-but-unconsumed credits never exceed the window.
 */
export class FlowState {
  readonly window: number;
  creditsRemaining: number;
  dataSent = 0;
  creditsGranted = 0;

  constructor(window: number, creditsRemaining = 0) {
    this.window = window;
    this.creditsRemaining = creditsRemaining;
  }

  sendData(): void {
    if (this.creditsRemaining < 1) {
      throw new CreditViolation("DATA send attempted with zero credits");
    }
    this.creditsRemaining -= 1;
    this.dataSent += 1;
  }

  creditReceived(n: number): void {
    this.creditsRemaining += n;
  }

  grant(n: number): void {
    if (this.creditsRemaining + n > this.window) {
      throw new CreditViolation("grant would exceed the window");
    }
    this.creditsRemaining += n;
    this.creditsGranted += n;
  }

  dataReceived(): void {
    if (this.creditsRemaining < 1) {
      throw new CreditViolation("peer sent DATA beyond granted credits");
    }
    this.creditsRemaining -= 1;
    this.dataSent += 1;
  }
}

export type SenderEvent = ["credit", number] | ["data"];
export type ConsumerEvent = ["grant", number] | ["recv"] | ["drain"];

/**
 * Replay a sender trace of ["credit", n] and ["data"] events.
 *
 * Grants include the handshake grant. Returns the maximum in-flight DATA
 * (sent but not yet covered by re-granted credits); throws CreditViolation
 * if any DATA was sent without a credit.
 */
export function checkSenderTrace(events: SenderEvent[], window: number): number {
  let credits = 0;
  let granted = 0;
  let sent = 0;
  let maxInFlight = 0;
  for (const ev of events) {
    if (ev[0] === "credit") {
      credits += ev[1];
      granted += ev[1];
    } else {
      if (credits < 1) {
        throw new CreditViolation(`DATA at event ${sent} without credit`);
      }
      credits -= 1;
      sent += 1;
      maxInFlight = Math.max(maxInFlight, sent - (granted - window));
    }
  }
  return maxInFlight;
}

export interface ConsumerTraceReport {
  maxQueue: number;
  grants: number[];
  received: number;
  drained: number;
}

/**
 * Replay a consumer trace of ["grant", n], ["recv"], ["drain"] events.
 *
 * Verifies that DATA never arrives beyond granted credits, that grants only
 * re-issue drained credits, and that granted-minus-drained never exceeds
 * the window (so a full queue blocks further grants).
 */
export function checkConsumerTrace(events: ConsumerEvent[], window: number): ConsumerTraceReport {
  let granted = 0;
  let received = 0;
  let drained = 0;
  let drainedAtLastGrant = 0;
  let maxQueue = 0;
  const grants: number[] = [];
  for (const ev of events) {
    if (ev[0] === "grant") {
      const n = ev[1];
      if (granted + n - drained > window) {
        throw new CreditViolation("grant overruns queue capacity");
      }
      if (granted > 0 && n > drained - drainedAtLastGrant) {
        throw new CreditViolation("grant exceeds credits drained since the last grant");
      }
      granted += n;
      drainedAtLastGrant = drained;
      grants.push(n);
    } else if (ev[0] === "recv") {
      received += 1;
      if (received > granted) {
        throw new CreditViolation("DATA received beyond granted credits");
      }
      maxQueue = Math.max(maxQueue, received - drained);
    } else {
      drained += 1;
    }
  }
  return { maxQueue, grants, received, drained };
}
